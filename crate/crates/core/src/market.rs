//! The price setter's view of the system: a network, its charging stations
//! and their demand forecasts, and the glue that turns station power into
//! bus injections and voltage deviation.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dispatch::{solve_dispatch, DispatchError, DispatchProblem, DispatchSolution, DEFAULT_REGULARIZATION};
use crate::equity::PriceMatrix;
use crate::grid::{GridError, LoadForecast, Network, StationConfig};
use crate::power_flow::{
    linearize_horizon, voltage_deviation, InjectionSchedule, JacobianBundle, NewtonOptions, OperatingPoint,
    PowerFlowError,
};
use crate::qp::QpError;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("station {station}: {source}")]
    Dispatch {
        station: u32,
        #[source]
        source: DispatchError,
    },
    #[error("inner solve failed: {0}")]
    SolverFailure(#[from] QpError),
    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<PricingError>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PricingError {
    pub fn at(self, iter: usize) -> Self {
        PricingError::AtIteration { iter, source: Box::new(self) }
    }
}

#[derive(Debug, Clone)]
pub struct PricingContext {
    net: Network,
    stations: Vec<StationConfig>,
    /// EV demand, `K x T`, MW.
    loads: DMatrix<f64>,
    dt_hours: f64,
    /// Curvature of each operator's cost in its own battery power, as a
    /// fraction of a dollar per MW² per MW of rating. Zero leaves only the
    /// tie-breaking regulariser.
    smoothing: f64,
    newton: NewtonOptions,
    station_bus: Vec<usize>,
}

impl PricingContext {
    /// `forecasts` are matched to `stations` by id.
    pub fn new(
        net: Network,
        stations: Vec<StationConfig>,
        forecasts: &[LoadForecast],
        dt_hours: f64,
    ) -> Result<Self, PricingError> {
        if stations.is_empty() {
            return Err(PricingError::Config("no charging stations".into()));
        }
        if !(dt_hours > 0.0) {
            return Err(PricingError::Config("dt_hours must be positive".into()));
        }
        let mut station_bus = Vec::with_capacity(stations.len());
        let mut rows = Vec::with_capacity(stations.len());
        for s in &stations {
            s.validate(&net)?;
            station_bus.push(net.bus_index(s.bus_id).expect("validated"));
            let f = forecasts
                .iter()
                .find(|f| f.station_id == s.station_id)
                .ok_or_else(|| PricingError::Config(format!("no load forecast for station {}", s.station_id)))?;
            rows.push(f.values.clone());
        }
        let horizon = rows[0].len();
        if rows.iter().any(|r| r.len() != horizon) {
            return Err(PricingError::Config("load forecasts differ in length".into()));
        }
        let loads = DMatrix::from_fn(stations.len(), horizon, |k, t| rows[k][t]);
        Ok(Self {
            net,
            stations,
            loads,
            dt_hours,
            smoothing: 0.0,
            newton: NewtonOptions::default(),
            station_bus,
        })
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn stations(&self) -> &[StationConfig] {
        &self.stations
    }

    pub fn station_ids(&self) -> Vec<u32> {
        self.stations.iter().map(|s| s.station_id).collect()
    }

    pub fn loads(&self) -> &DMatrix<f64> {
        &self.loads
    }

    pub fn k(&self) -> usize {
        self.stations.len()
    }

    pub fn horizon(&self) -> usize {
        self.loads.ncols()
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn newton(&self) -> NewtonOptions {
        self.newton
    }

    /// Bus index of each station.
    pub fn station_bus(&self) -> &[usize] {
        &self.station_bus
    }

    /// Prices drawn uniformly from `[0.1, 0.5]` $/kWh.
    pub fn random_prices(&self, seed: u64) -> PriceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = DMatrix::zeros(self.k(), self.horizon());
        for k in 0..self.k() {
            for t in 0..self.horizon() {
                values[(k, t)] = rng.random_range(0.1..=0.5);
            }
        }
        PriceMatrix::new(values, self.station_ids())
    }

    /// Weight on `Σ p_b²` in station `k`'s cost, $/MW².
    pub fn regularization(&self, k: usize) -> f64 {
        let s = &self.stations[k];
        if self.smoothing > 0.0 && s.p_max() > 0.0 {
            self.smoothing / s.p_max()
        } else {
            DEFAULT_REGULARIZATION
        }
    }

    /// The operator's problem for station `k` under its row of prices.
    pub fn dispatch_problem(&self, k: usize, prices: &[f64]) -> DispatchProblem {
        let s = &self.stations[k];
        let load = self.loads.row(k).iter().copied().collect();
        DispatchProblem::for_station(s, prices.to_vec(), load, self.dt_hours).with_regularization(self.regularization(k))
    }

    pub fn solve_dispatches(&self, prices: &PriceMatrix) -> Result<Vec<DispatchSolution>, PricingError> {
        self.check_prices(prices)?;
        (0..self.k())
            .into_par_iter()
            .map(|k| {
                solve_dispatch(&self.dispatch_problem(k, &prices.row(k)))
                    .map_err(|source| PricingError::Dispatch { station: self.stations[k].station_id, source })
            })
            .collect()
    }

    pub fn check_prices(&self, prices: &PriceMatrix) -> Result<(), PricingError> {
        if prices.stations() != self.k() || prices.horizon() != self.horizon() {
            return Err(PricingError::Config(format!(
                "price matrix is {}x{}, expected {}x{}",
                prices.stations(),
                prices.horizon(),
                self.k(),
                self.horizon()
            )));
        }
        if !prices.is_finite() {
            return Err(PricingError::Config("non-finite price".into()));
        }
        Ok(())
    }

    /// Station net power, `K x T`.
    pub fn net_power(dispatches: &[DispatchSolution]) -> DMatrix<f64> {
        let t_len = dispatches.first().map_or(0, |d| d.p_net.len());
        DMatrix::from_fn(dispatches.len(), t_len, |k, t| dispatches[k].p_net[t])
    }

    /// Base injections with each station's net consumption withdrawn at
    /// its bus. Reactive injections stay at the base case.
    pub fn injections(&self, p_net: &DMatrix<f64>) -> InjectionSchedule {
        let (p, q) = self.net.base_injections();
        let mut sched = InjectionSchedule::constant(&p, &q, self.horizon());
        let base = self.net.base_mva();
        for (k, &bus) in self.station_bus.iter().enumerate() {
            for t in 0..self.horizon() {
                sched.p[(bus, t)] -= p_net[(k, t)] / base;
            }
        }
        sched
    }

    /// Step-to-step injection changes, `n x T`, with the first column zero.
    pub fn injection_deltas(&self, p_net: &DMatrix<f64>) -> DMatrix<f64> {
        let base = self.net.base_mva();
        let mut dp = DMatrix::zeros(self.net.n(), self.horizon());
        for (k, &bus) in self.station_bus.iter().enumerate() {
            for t in 1..self.horizon() {
                dp[(bus, t)] -= (p_net[(k, t)] - p_net[(k, t - 1)]) / base;
            }
        }
        dp
    }

    /// Linearisations along the trajectory `p_net` induces.
    pub fn bundles(&self, p_net: &DMatrix<f64>) -> Result<Vec<JacobianBundle>, PowerFlowError> {
        let sched = self.injections(p_net);
        linearize_horizon(&self.net, &sched, &OperatingPoint::nominal(&self.net), self.newton)
    }

    /// `Σ_{t≥1} |J⁺_t [ΔP_t; 0]|²`.
    pub fn deviation(&self, bundles: &[JacobianBundle], p_net: &DMatrix<f64>) -> f64 {
        let dp = self.injection_deltas(p_net);
        let dq = vec![0.0; self.net.n()];
        (1..self.horizon())
            .map(|t| {
                let col: Vec<f64> = dp.column(t).iter().copied().collect();
                voltage_deviation(&bundles[t], &col, &dq)
            })
            .sum()
    }

    /// `A_incᵀ M_t A_inc / base²`: the deviation of step `t` as a quadratic
    /// form in the stations' net power changes, per MW².
    pub fn station_quadratic(&self, bundle: &JacobianBundle) -> DMatrix<f64> {
        let base2 = self.net.base_mva().powi(2);
        let rows: Vec<usize> =
            self.station_bus.iter().map(|&b| bundle.p_row(b).expect("stations are off the slack")).collect();
        DMatrix::from_fn(self.k(), self.k(), |a, b| bundle.sensitivity[(rows[a], rows[b])] / base2)
    }
}

/// Milliseconds since `start`.
pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    /// Slack plus three load buses in a ring, stations on buses 3 and 4.
    pub(crate) fn tiny_context(horizon: usize) -> PricingContext {
        let bus = |id, kind, load: f64| Bus {
            id,
            kind,
            base_load_p: load,
            base_load_q: 0.3 * load,
            base_gen_p: 0.0,
            base_gen_q: 0.0,
            v_nominal: 1.0,
            theta_nominal: 0.0,
        };
        let line = |a, b, x: f64| Line { from_bus: a, to_bus: b, conductance_g: 1.0 / x, susceptance_b: -4.0 / x, shunt_b: 0.0 };
        let net = Network::new(
            "tiny",
            100.0,
            vec![bus(1, BusKind::Slack, 0.0), bus(2, BusKind::Pq, 10.0), bus(3, BusKind::Pq, 8.0), bus(4, BusKind::Pq, 5.0)],
            vec![line(1, 2, 0.5), line(2, 3, 1.0), line(3, 4, 1.0), line(4, 1, 0.8)],
        )
        .unwrap();
        let stations = vec![StationConfig::new(1, 3, 1.0, 0.5), StationConfig::new(2, 4, 2.0, 0.4)];
        let forecasts: Vec<LoadForecast> = (0..2)
            .map(|k| LoadForecast {
                station_id: k as u32 + 1,
                values: (0..horizon).map(|t| 0.5 + 0.3 * ((t + 2 * k) as f64 * 1.3).sin()).collect(),
            })
            .collect();
        PricingContext::new(net, stations, &forecasts, 0.25).unwrap()
    }

    #[test]
    fn injections_withdraw_net_power() {
        let ctx = tiny_context(3);
        let p_net = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.5, 0.5, 0.5]);
        let s = ctx.injections(&p_net);
        let (p, _) = ctx.net().base_injections();
        assert!((s.p[(2, 1)] - (p[2] - 0.02)).abs() < 1e-15);
        assert!((s.p[(3, 2)] - (p[3] - 0.005)).abs() < 1e-15);
        let dp = ctx.injection_deltas(&p_net);
        for t in 1..3 {
            for i in 0..4 {
                assert!((dp[(i, t)] - (s.p[(i, t)] - s.p[(i, t - 1)])).abs() < 1e-15);
            }
        }
        assert!(dp.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn station_quadratic_reproduces_deviation() {
        let ctx = tiny_context(4);
        let p_net = DMatrix::from_row_slice(2, 4, &[1.0, 1.5, 0.7, 0.7, 0.2, -0.4, 0.0, 0.9]);
        let bundles = ctx.bundles(&p_net).unwrap();
        let mut via_q = 0.0;
        for t in 1..4 {
            let d = p_net.column(t) - p_net.column(t - 1);
            via_q += (d.transpose() * ctx.station_quadratic(&bundles[t]) * &d)[(0, 0)];
        }
        let direct = ctx.deviation(&bundles, &p_net);
        assert!((via_q - direct).abs() <= 1e-12 * direct, "{via_q} vs {direct}");
    }

    #[test]
    fn rejects_missing_forecast() {
        let ctx = tiny_context(2);
        let err = PricingContext::new(ctx.net().clone(), ctx.stations().to_vec(), &[], 0.25).unwrap_err();
        assert!(matches!(err, PricingError::Config(_)));
    }

    #[test]
    fn random_prices_in_range_and_seeded() {
        let ctx = tiny_context(10);
        let a = ctx.random_prices(7);
        assert_eq!(a, ctx.random_prices(7));
        assert_ne!(a, ctx.random_prices(8));
        assert!(a.values.iter().all(|&v| (0.1..=0.5).contains(&v)));
    }
}
