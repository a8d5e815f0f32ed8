//! The station operator's battery problem: given nodal prices and its EV
//! charging load, choose a battery schedule that minimises the cost of
//! the station's net consumption.
//!
//! Prices are $/kWh, powers MW and steps hours, so an interval costs
//! `1000 * dt * price * p_net` dollars. Positive battery power is charging.

mod oracle;
mod sensitivity;
pub(crate) mod soc_space;

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::StationConfig;
use crate::linalg::SymBand;
use crate::qp::{QpError, QpOptions, QpProblem};
use soc_space::SocSpace;

pub use oracle::dispatch_oracle_dp;
pub use sensitivity::{dispatch_sensitivity, SensitivityBlock};

/// Strictly convex tie-breaker on battery power, $ per MW² per interval.
pub const DEFAULT_REGULARIZATION: f64 = 1e-6;

/// Longest horizon the exhaustive oracle accepts.
pub const ORACLE_MAX_HORIZON: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("invalid dispatch problem: {0}")]
    InvalidProblem(String),
    #[error("battery has zero capacity")]
    ZeroCapacity,
    #[error("horizon {horizon} exceeds the oracle limit of {limit}")]
    TooLarge { horizon: usize, limit: usize },
    #[error("dispatch solver failed: {0}")]
    SolverFailure(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchProblem {
    /// $/kWh per step.
    pub prices: Vec<f64>,
    /// EV charging demand, MW per step.
    pub load: Vec<f64>,
    pub capacity_mwh: f64,
    pub soc_init: f64,
    pub p_max_mw: f64,
    pub dt_hours: f64,
    /// Weight of `Σ p_b²` in the objective, $/MW².
    pub regularization: f64,
}

impl DispatchProblem {
    pub fn new(prices: Vec<f64>, load: Vec<f64>, capacity_mwh: f64, soc_init: f64, p_max_mw: f64, dt_hours: f64) -> Self {
        Self { prices, load, capacity_mwh, soc_init, p_max_mw, dt_hours, regularization: DEFAULT_REGULARIZATION }
    }

    pub fn for_station(station: &StationConfig, prices: Vec<f64>, load: Vec<f64>, dt_hours: f64) -> Self {
        Self::new(prices, load, station.capacity_mwh, station.soc_init, station.p_max(), dt_hours)
    }

    pub fn with_regularization(mut self, regularization: f64) -> Self {
        self.regularization = regularization;
        self
    }

    pub fn horizon(&self) -> usize {
        self.prices.len()
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |m: &str| Err(DispatchError::InvalidProblem(m.to_string()));
        if self.load.len() != self.prices.len() {
            return bad("prices and load differ in length");
        }
        if !(self.dt_hours > 0.0) {
            return bad("dt_hours must be positive");
        }
        if !(self.capacity_mwh >= 0.0) || !self.capacity_mwh.is_finite() {
            return bad("capacity must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.soc_init) {
            return bad("soc_init must lie in [0, 1]");
        }
        if !(self.p_max_mw >= 0.0) {
            return bad("p_max must be non-negative");
        }
        if !(self.regularization > 0.0) {
            return bad("regularization must be positive");
        }
        if self.prices.iter().chain(&self.load).any(|v| !v.is_finite()) {
            return bad("prices and load must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub p_b: Vec<f64>,
    /// `T + 1` entries, starting at the initial charge.
    pub soc: Vec<f64>,
    pub p_net: Vec<f64>,
    /// Energy cost in $, excluding the regulariser.
    pub cost: f64,
    pub kkt_residual: f64,
    pub(crate) active: Option<ActiveSet>,
}

/// Per-row multiplier and slack of the charge-space problem, normalised so
/// the two are comparable.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ActiveSet {
    pub z: Vec<f64>,
    pub slack: Vec<f64>,
}

impl DispatchSolution {
    /// `t,price,load,p_b,soc,p_net`, with `soc` the charge at the end of
    /// the step.
    pub fn write_csv<W: Write>(&self, writer: W, prices: &[f64], load: &[f64]) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["t", "price", "load", "p_b", "soc", "p_net"])?;
        for t in 0..self.p_b.len() {
            out.write_record([
                t.to_string(),
                prices[t].to_string(),
                load[t].to_string(),
                self.p_b[t].to_string(),
                self.soc[t + 1].to_string(),
                self.p_net[t].to_string(),
            ])?;
        }
        out.flush()
    }

    /// Checks every feasibility invariant exactly (the charge recursion to
    /// rounding).
    pub fn check_feasible(&self, prob: &DispatchProblem) -> Result<(), String> {
        let t_len = prob.horizon();
        if self.p_b.len() != t_len || self.soc.len() != t_len + 1 || self.p_net.len() != t_len {
            return Err("length mismatch".into());
        }
        if self.soc[0] != prob.soc_init {
            return Err("initial charge altered".into());
        }
        for t in 0..t_len {
            if self.p_b[t].abs() > prob.p_max_mw {
                return Err(format!("t{t}: |p_b| = {} exceeds {}", self.p_b[t].abs(), prob.p_max_mw));
            }
            if !(0.0..=1.0).contains(&self.soc[t + 1]) {
                return Err(format!("t{t}: charge {} outside [0, 1]", self.soc[t + 1]));
            }
            if self.p_net[t] != self.p_b[t] + prob.load[t] {
                return Err(format!("t{t}: p_net is not p_b + load"));
            }
            if prob.capacity_mwh > 0.0 {
                let next = self.soc[t] + self.p_b[t] * prob.dt_hours / prob.capacity_mwh;
                if (next - self.soc[t + 1]).abs() > 1e-12 {
                    return Err(format!("t{t}: charge recursion off by {}", next - self.soc[t + 1]));
                }
            } else if self.p_b[t] != 0.0 || self.soc[t + 1] != self.soc[t] {
                return Err(format!("t{t}: zero-capacity battery moved"));
            }
        }
        Ok(())
    }
}

/// Charge after one step.
pub fn soc_step(soc: f64, p_b: f64, dt_hours: f64, capacity_mwh: f64) -> Result<f64, DispatchError> {
    if capacity_mwh == 0.0 {
        return Err(DispatchError::ZeroCapacity);
    }
    Ok(soc + p_b * dt_hours / capacity_mwh)
}

/// Dollars paid for `p_net` MW over steps of `dt_hours` at `prices` $/kWh.
pub fn energy_cost(prices: &[f64], p_net: &[f64], dt_hours: f64) -> f64 {
    prices.iter().zip(p_net).map(|(l, p)| 1000.0 * dt_hours * l * p).sum()
}

/// Turns a raw charge trajectory into an exactly feasible schedule: each
/// step is clipped to the power and charge limits in turn.
pub(crate) fn feasible_schedule(prob: &DispatchProblem, target_soc: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (e, dt, pm) = (prob.capacity_mwh, prob.dt_hours, prob.p_max_mw);
    let mut soc = Vec::with_capacity(target_soc.len() + 1);
    soc.push(prob.soc_init);
    let mut p_b = Vec::with_capacity(target_soc.len());
    for &target in target_soc {
        let cur = *soc.last().unwrap();
        let mut p = ((target - cur) * e / dt).clamp(-pm, pm);
        let mut next = (cur + p * dt / e).clamp(0.0, 1.0);
        if next != cur + p * dt / e {
            p = ((next - cur) * e / dt).clamp(-pm, pm);
            next = (cur + p * dt / e).clamp(0.0, 1.0);
        }
        p_b.push(p);
        soc.push(next);
    }
    (p_b, soc)
}

fn idle(prob: &DispatchProblem) -> DispatchSolution {
    let t_len = prob.horizon();
    let p_net = prob.load.clone();
    DispatchSolution {
        p_b: vec![0.0; t_len],
        soc: vec![prob.soc_init; t_len + 1],
        cost: energy_cost(&prob.prices, &p_net, prob.dt_hours),
        p_net,
        kkt_residual: 0.0,
        active: None,
    }
}

pub(crate) fn build_qp(prob: &DispatchProblem) -> (SocSpace, QpProblem) {
    let t_len = prob.horizon();
    let space = SocSpace::new(vec![prob.capacity_mwh / prob.dt_hours], vec![prob.soc_init], t_len);
    let h_p = DMatrix::from_diagonal_element(t_len, t_len, 2.0 * prob.regularization);
    let g_p: Vec<f64> = prob.prices.iter().map(|l| 1000.0 * prob.dt_hours * l).collect();
    let (h_s, g_s): (SymBand, Vec<f64>) = space.quadratic(&h_p, &g_p);
    let mut qp = QpProblem::new(h_s, g_s).expect("consistent sizes");
    space.add_bounds(&mut qp, &[prob.p_max_mw]);
    qp.set_start(vec![0.5; t_len]);
    (space, qp)
}

/// Cost-minimising schedule, certified by the relative KKT residual of the
/// underlying program.
pub fn solve_dispatch(prob: &DispatchProblem) -> Result<DispatchSolution, DispatchError> {
    prob.validate()?;
    if prob.capacity_mwh == 0.0 || prob.p_max_mw == 0.0 || prob.horizon() == 0 {
        return Ok(idle(prob));
    }
    let (_, qp) = build_qp(prob);
    let sol = qp.solve(&QpOptions::default())?;
    let (p_b, soc) = feasible_schedule(prob, &sol.x);
    let p_net: Vec<f64> = p_b.iter().zip(&prob.load).map(|(b, l)| b + l).collect();
    let out = DispatchSolution {
        cost: energy_cost(&prob.prices, &p_net, prob.dt_hours),
        p_b,
        soc,
        p_net,
        kkt_residual: sol.kkt_residual,
        active: Some(ActiveSet { z: sol.scaled_z, slack: sol.scaled_slack }),
    };
    debug_assert!(out.check_feasible(prob).is_ok(), "{:?}", out.check_feasible(prob));
    Ok(out)
}
