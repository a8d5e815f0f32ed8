//! Implicitly constrained dual pricing.
//!
//! Each outer iteration solves one convex program over every battery's
//! schedule at once: linearised voltage deviation, the energy bill at the
//! current prices and an equity penalty on the prices the schedule implies.
//! Those prices come from the closed-form dual of the consensus constraint,
//! `λ*_t = 2σ [M_t ΔP_t]_K`, which is linear in the schedule, so the
//! equity term can be written with two epigraph variables. The new prices
//! are fed back and the process repeats.
//!
//! Signs: injections are generation-positive, prices consumption-positive,
//! so with `ΔP` at a station bus equal to minus its net power change over
//! the base MVA, `λ*_k(t) = κ [Q_t Δp_t]_k` with `κ = 2σ · base` and
//! `Q_t` from [`PricingContext::station_quadratic`]. The first step has no
//! predecessor and is priced at zero.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dispatch::soc_space::SocSpace;
use crate::dispatch::{energy_cost, feasible_schedule, DispatchProblem, DispatchSolution};
use crate::equity::{burden, gamma, gamma_epigraph_terms, gamma_of_burdens, LinearForm, PriceMatrix};
use crate::market::{elapsed_ms, PricingContext, PricingError};
use crate::power_flow::{InjectionSchedule, JacobianBundle};
use crate::qp::{QpOptions, QpProblem, SparseRow};

/// Fraction of the marginal deviation cost passed on as price. At the full
/// cost the bill gradient a station sees equals the deviation gradient and
/// the outer loop overshoots; at a hundredth it settles.
pub const MARGINAL_PRICE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct IcdConfig {
    /// $ per p.u.² of linearised voltage deviation.
    pub alpha: f64,
    /// $ per $/kWh of burden spread.
    pub beta: f64,
    /// Starting prices; drawn from `seed` when absent.
    pub lambda0: Option<PriceMatrix>,
    pub seed: u64,
    pub max_outer_iters: usize,
    /// $/kWh.
    pub price_tol: f64,
    pub kkt_tol: f64,
    /// Per-unit dual to $/kWh. `None` uses [`MARGINAL_PRICE_FRACTION`] of
    /// the marginal deviation cost of a kWh, `α / (base · 1000 · dt)`.
    pub price_scale: Option<f64>,
}

impl IcdConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            lambda0: None,
            seed: 0,
            max_outer_iters: 10,
            price_tol: 1e-4,
            kkt_tol: 1e-6,
            price_scale: None,
        }
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        let bad = |m: &str| Err(PricingError::Config(m.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be at least 1");
        }
        if matches!(self.price_scale, Some(s) if !(s > 0.0)) {
            return bad("price_scale must be positive");
        }
        Ok(())
    }

    pub fn scale(&self, ctx: &PricingContext) -> f64 {
        self.price_scale
            .unwrap_or(MARGINAL_PRICE_FRACTION * self.alpha / (ctx.net().base_mva() * 1000.0 * ctx.dt_hours()))
    }
}

/// `λ*_k(t) = -2σ [M_t dp_t]_{bus k}` for per-unit injection changes `dp`
/// (`n x T`), using bundle `t` for column `t`.
pub fn dual_price_from_primal(
    bundles: &[JacobianBundle],
    dp: &DMatrix<f64>,
    station_bus: &[usize],
    station_ids: Vec<u32>,
    scale: f64,
) -> PriceMatrix {
    let t_len = dp.ncols();
    let mut values = DMatrix::zeros(station_bus.len(), t_len);
    for t in 0..t_len {
        let b = &bundles[t];
        let dp_ns = DVector::from_iterator(b.non_slack().len(), b.non_slack().iter().map(|&i| dp[(i, t)]));
        if dp_ns.iter().all(|&v| v == 0.0) {
            continue;
        }
        let m_dp = &b.sensitivity * dp_ns;
        for (k, &bus) in station_bus.iter().enumerate() {
            let r = b.p_row(bus).expect("stations are off the slack");
            values[(k, t)] = -2.0 * scale * m_dp[r];
        }
    }
    PriceMatrix::new(values, station_ids)
}

/// One solved instance of the combined program.
#[derive(Debug, Clone)]
pub struct IcdInner {
    /// Prices implied by the schedule.
    pub prices: PriceMatrix,
    pub p_net: DMatrix<f64>,
    pub dispatches: Vec<DispatchSolution>,
    pub injections: InjectionSchedule,
    /// Aggregate generation per step, p.u. Losses are ignored so it equals
    /// total withdrawal.
    pub generation: Vec<f64>,
    /// Linearised deviation `Σ |J⁺ ΔP|²` with the bundles used.
    pub deviation: f64,
    pub gamma_value: f64,
    /// Value of the program's objective, $.
    pub objective: f64,
    /// `α · deviation - β · Γ`.
    pub merit: f64,
    pub kkt_residual: f64,
    /// Worst mismatch between bus injections and station net power, p.u.
    pub consensus_residual: f64,
}

/// Solves the combined program with prices `lambda0` in the energy bill and
/// the deviation linearised with `bundles` (one per step).
pub fn build_and_solve_icd(
    ctx: &PricingContext,
    lambda0: &PriceMatrix,
    cfg: &IcdConfig,
    bundles: &[JacobianBundle],
) -> Result<IcdInner, PricingError> {
    cfg.validate()?;
    ctx.check_prices(lambda0)?;
    let (k, t_len, dt) = (ctx.k(), ctx.horizon(), ctx.dt_hours());
    if bundles.len() != t_len {
        return Err(PricingError::Config(format!("{} bundles for {} steps", bundles.len(), t_len)));
    }
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let scale = cfg.scale(ctx);
    let kappa = 2.0 * scale * ctx.net().base_mva();
    let loads = ctx.loads();
    let q: Vec<DMatrix<f64>> = (0..t_len)
        .map(|t| if t == 0 { DMatrix::zeros(k, k) } else { ctx.station_quadratic(&bundles[t]) })
        .collect();
    let dload: Vec<DVector<f64>> = (0..t_len)
        .map(|t| if t == 0 { DVector::zeros(k) } else { loads.column(t) - loads.column(t - 1) })
        .collect();
    let q_dload: Vec<DVector<f64>> = q.iter().zip(&dload).map(|(q, d)| q * d).collect();

    let stations = ctx.stations();
    let reg: Vec<f64> = (0..k).map(|j| ctx.regularization(j)).collect();
    let batt: Vec<usize> = (0..k).filter(|&j| stations[j].capacity_mwh > 0.0 && stations[j].p_max() > 0.0).collect();
    let kb = batt.len();
    let n = kb * t_len;
    let equity = k >= 2 && beta > 0.0;

    let (x, kkt_residual) = if n == 0 {
        (Vec::new(), 0.0)
    } else {
        let mut h_p = DMatrix::zeros(n, n);
        let mut g_p = vec![0.0; n];
        for t in 1..t_len {
            for (a, &ja) in batt.iter().enumerate() {
                let (now, prev) = (t * kb + a, (t - 1) * kb + a);
                g_p[now] += 2.0 * alpha * q_dload[t][ja];
                g_p[prev] -= 2.0 * alpha * q_dload[t][ja];
                for (b, &jb) in batt.iter().enumerate() {
                    let c = 2.0 * alpha * q[t][(ja, jb)];
                    let (now_b, prev_b) = (t * kb + b, (t - 1) * kb + b);
                    h_p[(now, now_b)] += c;
                    h_p[(prev, prev_b)] += c;
                    h_p[(now, prev_b)] -= c;
                    h_p[(prev, now_b)] -= c;
                }
            }
        }
        for t in 0..t_len {
            for (a, &ja) in batt.iter().enumerate() {
                let i = t * kb + a;
                h_p[(i, i)] += 2.0 * reg[ja];
                g_p[i] += 1000.0 * dt * lambda0.values[(ja, t)];
            }
        }
        let gains: Vec<f64> = batt.iter().map(|&j| stations[j].capacity_mwh / dt).collect();
        let s0: Vec<f64> = batt.iter().map(|&j| stations[j].soc_init).collect();
        let space = SocSpace::new(gains, s0.clone(), t_len);
        let (h_s, mut linear) = space.quadratic(&h_p, &g_p);
        if equity {
            linear.extend([beta, -beta]);
        }
        let mut qp = QpProblem::new(h_s, linear)?;
        let p_max: Vec<f64> = batt.iter().map(|&j| stations[j].p_max()).collect();
        space.add_bounds(&mut qp, &p_max);
        let mut start: Vec<f64> = (0..n).map(|i| s0[i % kb]).collect();
        if equity {
            let forms: Vec<LinearForm> = (0..k)
                .map(|row| {
                    let mut a_p = vec![0.0; n];
                    let mut c = 0.0;
                    for t in 1..t_len {
                        for (a, &ja) in batt.iter().enumerate() {
                            a_p[t * kb + a] += kappa * q[t][(row, ja)];
                            a_p[(t - 1) * kb + a] -= kappa * q[t][(row, ja)];
                        }
                        c += kappa * q_dload[t][row];
                    }
                    let (a_s, b_s) = space.linear_form(&a_p, c);
                    LinearForm { coeffs: SparseRow::new(a_s.into_iter().enumerate()), constant: b_s }
                })
                .collect();
            let terms = gamma_epigraph_terms(k);
            for (row, rhs) in terms.rows(&forms, n) {
                qp.add_row(row, rhs);
            }
            let idle: Vec<f64> = forms.iter().map(|f| f.eval(&start)).collect();
            let (u, l) = terms.feasible_point(&idle);
            start.extend([u, l]);
        }
        qp.set_start(start);
        let sol = qp.solve(&QpOptions { kkt_tol: cfg.kkt_tol, ..QpOptions::default() })?;
        (sol.x, sol.kkt_residual)
    };

    let mut p_b = DMatrix::zeros(k, t_len);
    let mut socs = vec![Vec::new(); k];
    for j in 0..k {
        match batt.iter().position(|&b| b == j) {
            Some(a) => {
                let target: Vec<f64> = (0..t_len).map(|t| x[t * kb + a]).collect();
                let prob = DispatchProblem::for_station(
                    &stations[j],
                    lambda0.row(j),
                    loads.row(j).iter().copied().collect(),
                    dt,
                );
                let (pb, soc) = feasible_schedule(&prob, &target);
                for t in 0..t_len {
                    p_b[(j, t)] = pb[t];
                }
                socs[j] = soc;
            }
            None => socs[j] = vec![stations[j].soc_init; t_len + 1],
        }
    }
    let p_net = &p_b + loads;
    let injections = ctx.injections(&p_net);
    let dp = ctx.injection_deltas(&p_net);
    let prices = dual_price_from_primal(bundles, &dp, ctx.station_bus(), ctx.station_ids(), scale);
    let dispatches: Vec<DispatchSolution> = (0..k)
        .map(|j| {
            let p_net_j: Vec<f64> = p_net.row(j).iter().copied().collect();
            DispatchSolution {
                p_b: p_b.row(j).iter().copied().collect(),
                soc: socs[j].clone(),
                cost: energy_cost(&prices.row(j), &p_net_j, dt),
                p_net: p_net_j,
                kkt_residual,
                active: None,
            }
        })
        .collect();

    let deviation = ctx.deviation(bundles, &p_net);
    let gamma_value = gamma(&prices);
    let bill: f64 = (0..k).map(|j| energy_cost(&lambda0.row(j), &dispatches[j].p_net, dt)).sum();
    let spread = if equity { -gamma_of_burdens(&burden(&prices)) } else { 0.0 };
    let objective = alpha * deviation + bill + beta * spread + (0..k).map(|j| reg[j] * p_b.row(j).norm_squared()).sum::<f64>();
    let merit = alpha * deviation - beta * gamma_value;

    let (base_p, _) = ctx.net().base_injections();
    let base = ctx.net().base_mva();
    let mut consensus_residual = 0.0f64;
    for t in 0..t_len {
        for &bus in ctx.station_bus() {
            let withdrawn: f64 =
                (0..k).filter(|&j| ctx.station_bus()[j] == bus).map(|j| p_net[(j, t)]).sum::<f64>() / base;
            consensus_residual = consensus_residual.max((injections.p[(bus, t)] - base_p[bus] + withdrawn).abs());
        }
    }
    let generation = (0..t_len).map(|t| -injections.p.column(t).sum() + base_p[ctx.net().slack()]).collect();

    Ok(IcdInner {
        prices,
        p_net,
        dispatches,
        injections,
        generation,
        deviation,
        gamma_value,
        objective,
        merit,
        kkt_residual,
        consensus_residual,
    })
}

/// One line of the per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcdIterLog {
    pub iter: usize,
    pub objective: f64,
    pub deviation: f64,
    pub gamma: f64,
    pub price_delta_inf: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct IcdSolution {
    pub prices: PriceMatrix,
    pub p_net: DMatrix<f64>,
    pub injections: InjectionSchedule,
    pub dispatches: Vec<DispatchSolution>,
    pub deviation: f64,
    pub gamma_value: f64,
    /// Merit `α · deviation - β · Γ` of the returned iterate.
    pub objective: f64,
    /// Outer iterations run.
    pub outer_iters: usize,
    /// 1-based iteration the returned iterate came from.
    pub best_iter: usize,
    /// Wall time of each combined solve alone, without relinearisation.
    pub inner_ms: Vec<f64>,
    pub log: Vec<IcdIterLog>,
}

/// Iterates the combined program, each time pricing with the previous
/// iterate's prices and linearising along its trajectory. The first
/// iteration linearises along the idle-battery trajectory.
pub fn run_icd(ctx: &PricingContext, cfg: &IcdConfig) -> Result<IcdSolution, PricingError> {
    cfg.validate()?;
    let mut lambda = match &cfg.lambda0 {
        Some(l) => l.clone(),
        None => ctx.random_prices(cfg.seed),
    };
    ctx.check_prices(&lambda)?;
    let mut trajectory = ctx.loads().clone();
    let mut best: Option<(usize, IcdInner)> = None;
    let mut log = Vec::new();
    let mut inner_ms = Vec::new();
    for iter in 1..=cfg.max_outer_iters {
        let start = Instant::now();
        let bundles = ctx.bundles(&trajectory).map_err(|e| PricingError::from(e).at(iter))?;
        let solve_start = Instant::now();
        let inner = build_and_solve_icd(ctx, &lambda, cfg, &bundles).map_err(|e| e.at(iter))?;
        inner_ms.push(elapsed_ms(solve_start));
        let delta = (&inner.prices.values - &lambda.values).amax();
        log.push(IcdIterLog {
            iter,
            objective: inner.merit,
            deviation: inner.deviation,
            gamma: inner.gamma_value,
            price_delta_inf: delta,
            wall_ms: elapsed_ms(start),
        });
        log::debug!("icd iter {iter}: merit {:.6e} gamma {:.3e} delta {delta:.3e}", inner.merit, inner.gamma_value);
        let merit = inner.merit;
        // No improvement on the best merit so far ends the loop.
        let stalled = best.as_ref().is_some_and(|(_, b)| b.merit - merit < 1e-6 * b.merit.abs().max(1.0));
        lambda = inner.prices.clone();
        trajectory = inner.p_net.clone();
        if best.as_ref().is_none_or(|(_, b)| merit < b.merit) {
            best = Some((iter, inner));
        }
        if delta < cfg.price_tol || stalled {
            break;
        }
    }
    let (best_iter, inner) = best.expect("at least one iteration");
    Ok(IcdSolution {
        prices: inner.prices,
        p_net: inner.p_net,
        injections: inner.injections,
        dispatches: inner.dispatches,
        deviation: inner.deviation,
        gamma_value: inner.gamma_value,
        objective: inner.merit,
        outer_iters: log.len(),
        best_iter,
        inner_ms,
        log,
    })
}

/// Writes the log as JSON lines.
pub fn write_icd_log<W: Write>(mut writer: W, log: &[IcdIterLog]) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
