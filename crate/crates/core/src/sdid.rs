//! Subgradient descent through the operators' optimal responses.
//!
//! `F(λ) = α Σ_t |J⁺_t ΔP_t(λ)|² - β Γ(λ)` where `ΔP_t(λ)` comes from each
//! operator's optimal schedule at its own prices. Operators only see their
//! own row of prices, so `∇P*` is block diagonal with one
//! [`SensitivityBlock`] per station. The deviation gradient treats the
//! linearisations as fixed for the iteration.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dispatch::{dispatch_sensitivity, solve_dispatch, DispatchSolution, SensitivityBlock};
use crate::equity::{burden, extreme_stations, gamma, PriceMatrix};
use crate::market::{elapsed_ms, PricingContext, PricingError};
use crate::power_flow::{InjectionSchedule, JacobianBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct SdidConfig {
    /// $ per p.u.² of linearised voltage deviation.
    pub alpha: f64,
    /// $ per $/kWh of burden spread.
    pub beta: f64,
    pub eta_init: f64,
    pub gamma_decay: f64,
    pub decay: bool,
    pub n_iters: usize,
    pub seed: u64,
    /// Compare the first gradient against finite differences.
    pub fd_check: bool,
    /// Starting prices; drawn from `seed` when absent.
    pub init: Option<PriceMatrix>,
}

impl SdidConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            eta_init: 5.0,
            gamma_decay: 0.9,
            decay: true,
            n_iters: 50,
            seed: 0,
            fd_check: false,
            init: None,
        }
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        let bad = |m: &str| Err(PricingError::Config(m.to_string()));
        if !(self.eta_init >= 0.0) {
            return bad("eta_init must be non-negative");
        }
        if !(self.gamma_decay > 0.0 && self.gamma_decay <= 1.0) {
            return bad("gamma_decay must lie in (0, 1]");
        }
        if self.n_iters == 0 {
            return bad("n_iters must be at least 1");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        Ok(())
    }
}

/// Each station starts on a flat price drawn uniformly from
/// `[0.1, 0.5]` $/kWh.
pub fn initial_prices(ctx: &PricingContext, seed: u64) -> PriceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels: Vec<f64> = (0..ctx.k()).map(|_| rng.random_range(0.1..=0.5)).collect();
    PriceMatrix::new(DMatrix::from_fn(ctx.k(), ctx.horizon(), |k, _| levels[k]), ctx.station_ids())
}

pub fn objective_f(
    ctx: &PricingContext,
    prices: &PriceMatrix,
    p_net: &DMatrix<f64>,
    bundles: &[JacobianBundle],
    alpha: f64,
    beta: f64,
) -> f64 {
    let dev = if alpha == 0.0 { 0.0 } else { ctx.deviation(bundles, p_net) };
    alpha * dev - beta * gamma(prices)
}

/// `∂₁f ∇P* + ∂₂f`, `K x T`.
pub fn grad_f(
    ctx: &PricingContext,
    prices: &PriceMatrix,
    p_net: &DMatrix<f64>,
    sensitivities: &[SensitivityBlock],
    bundles: &[JacobianBundle],
    alpha: f64,
    beta: f64,
) -> DMatrix<f64> {
    let (k, t_len) = (ctx.k(), ctx.horizon());
    let base = ctx.net().base_mva();
    let mut grad = DMatrix::zeros(k, t_len);
    if alpha != 0.0 {
        let dp = ctx.injection_deltas(p_net);
        // g_t = 2 M_t ΔP_t over the non-slack rows; zero outside 1..T.
        let g: Vec<DVector<f64>> = (0..=t_len)
            .map(|t| {
                if t == 0 || t == t_len {
                    return DVector::zeros(0);
                }
                let b = &bundles[t];
                let dp_ns = DVector::from_iterator(b.non_slack().len(), b.non_slack().iter().map(|&i| dp[(i, t)]));
                &b.sensitivity * dp_ns * 2.0
            })
            .collect();
        let at = |t: usize, bus: usize| -> f64 {
            if g[t].is_empty() {
                0.0
            } else {
                g[t][bundles[t].p_row(bus).expect("stations are off the slack")]
            }
        };
        for (j, &bus) in ctx.station_bus().iter().enumerate() {
            let df_dp = DVector::from_fn(t_len, |t, _| -alpha / base * (at(t, bus) - at(t + 1, bus)));
            let row = sensitivities[j].dp_dlambda.transpose() * df_dp;
            grad.row_mut(j).copy_from(&row.transpose());
        }
    }
    if beta != 0.0 {
        let b = burden(prices);
        let (lo, hi) = extreme_stations(&b);
        if b[lo] != b[hi] {
            grad.row_mut(hi).add_scalar_mut(beta);
            grad.row_mut(lo).add_scalar_mut(-beta);
        }
    }
    grad
}

/// Central differences of `F` with the linearisations held fixed, each
/// price moved by `h` and the owning station re-solved.
pub fn fd_grad_f(
    ctx: &PricingContext,
    prices: &PriceMatrix,
    bundles: &[JacobianBundle],
    alpha: f64,
    beta: f64,
    h: f64,
) -> Result<DMatrix<f64>, PricingError> {
    let base = ctx.solve_dispatches(prices)?;
    let p_net = PricingContext::net_power(&base);
    let entries: Vec<(usize, usize)> = (0..ctx.k()).flat_map(|j| (0..ctx.horizon()).map(move |t| (j, t))).collect();
    let vals: Result<Vec<f64>, PricingError> = entries
        .par_iter()
        .map(|&(j, t)| {
            let eval = |sign: f64| -> Result<f64, PricingError> {
                let mut p = prices.clone();
                p.values[(j, t)] += sign * h;
                let sol = solve_dispatch(&ctx.dispatch_problem(j, &p.row(j))).map_err(|source| {
                    PricingError::Dispatch { station: ctx.stations()[j].station_id, source }
                })?;
                let mut moved = p_net.clone();
                for (s, v) in sol.p_net.iter().enumerate() {
                    moved[(j, s)] = *v;
                }
                Ok(objective_f(ctx, &p, &moved, bundles, alpha, beta))
            };
            Ok((eval(1.0)? - eval(-1.0)?) / (2.0 * h))
        })
        .collect();
    let vals = vals?;
    Ok(DMatrix::from_fn(ctx.k(), ctx.horizon(), |j, t| vals[j * ctx.horizon() + t]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdidRecord {
    pub iter: usize,
    pub objective: f64,
    pub deviation: f64,
    pub gamma: f64,
    pub eta: f64,
    pub prices: PriceMatrix,
    /// Some station's sensitivity met a weakly active constraint.
    pub degenerate: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdidTrace {
    pub records: Vec<SdidRecord>,
}

impl SdidTrace {
    /// `iter,F,deviation,gamma,eta`.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["iter", "F", "deviation", "gamma", "eta"])?;
        for r in &self.records {
            out.write_record([
                r.iter.to_string(),
                r.objective.to_string(),
                r.deviation.to_string(),
                r.gamma.to_string(),
                r.eta.to_string(),
            ])?;
        }
        out.flush()
    }

    pub fn initial(&self) -> &SdidRecord {
        &self.records[0]
    }
}

#[derive(Debug, Clone)]
pub struct SdidResult {
    /// Prices of the lowest-`F` iterate.
    pub prices: PriceMatrix,
    pub best_iter: usize,
    pub trace: SdidTrace,
    pub dispatches: Vec<DispatchSolution>,
    pub p_net: DMatrix<f64>,
    pub injections: InjectionSchedule,
    /// `max |analytic - fd| / max |fd|` at the first iterate, when asked.
    pub fd_error: Option<f64>,
}

pub fn run_sdid(ctx: &PricingContext, cfg: &SdidConfig) -> Result<SdidResult, PricingError> {
    cfg.validate()?;
    let mut lambda = match &cfg.init {
        Some(p) => p.clone(),
        None => initial_prices(ctx, cfg.seed),
    };
    ctx.check_prices(&lambda)?;
    let mut eta = cfg.eta_init;
    let mut trace = SdidTrace::default();
    let mut best: Option<(usize, f64, Vec<DispatchSolution>)> = None;
    let mut fd_error = None;
    for iter in 0..cfg.n_iters {
        let start = Instant::now();
        let step = || -> Result<_, PricingError> {
            let dispatches = ctx.solve_dispatches(&lambda)?;
            let p_net = PricingContext::net_power(&dispatches);
            let bundles = ctx.bundles(&p_net)?;
            let sens: Vec<SensitivityBlock> = (0..ctx.k())
                .into_par_iter()
                .map(|j| {
                    dispatch_sensitivity(&ctx.dispatch_problem(j, &lambda.row(j)), &dispatches[j]).map_err(
                        |source| PricingError::Dispatch { station: ctx.stations()[j].station_id, source },
                    )
                })
                .collect::<Result<_, _>>()?;
            Ok((dispatches, p_net, bundles, sens))
        };
        let (dispatches, p_net, bundles, sens) = step().map_err(|e| e.at(iter))?;
        let deviation = ctx.deviation(&bundles, &p_net);
        let g_val = gamma(&lambda);
        let objective = cfg.alpha * deviation - cfg.beta * g_val;
        let grad = grad_f(ctx, &lambda, &p_net, &sens, &bundles, cfg.alpha, cfg.beta);
        if cfg.fd_check && iter == 0 {
            let fd = fd_grad_f(ctx, &lambda, &bundles, cfg.alpha, cfg.beta, 1e-5).map_err(|e| e.at(iter))?;
            fd_error = Some((&grad - &fd).amax() / fd.amax().max(f64::MIN_POSITIVE));
        }
        trace.records.push(SdidRecord {
            iter,
            objective,
            deviation,
            gamma: g_val,
            eta,
            prices: lambda.clone(),
            degenerate: sens.iter().any(|s| s.is_degenerate()),
            wall_ms: elapsed_ms(start),
        });
        log::debug!("sdid iter {iter}: F {objective:.6e} gamma {g_val:.3e} eta {eta:.3e}");
        if best.as_ref().is_none_or(|(_, f, _)| objective < *f) {
            best = Some((iter, objective, dispatches));
        }
        lambda.values -= grad * eta;
        if cfg.decay {
            eta *= cfg.gamma_decay;
        }
    }
    let (best_iter, _, dispatches) = best.expect("at least one iteration");
    let p_net = PricingContext::net_power(&dispatches);
    Ok(SdidResult {
        prices: trace.records[best_iter].prices.clone(),
        best_iter,
        injections: ctx.injections(&p_net),
        p_net,
        dispatches,
        trace,
        fd_error,
    })
}
