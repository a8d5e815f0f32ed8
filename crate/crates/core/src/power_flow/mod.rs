//! AC power flow in polar coordinates.
//!
//! Every bus is PQ except the slack. The Newton solver fixes both the slack
//! magnitude and angle; the sensitivity Jacobian in [`JacobianBundle`] keeps
//! the slack magnitude as a variable and drops only the slack angle column
//! together with the slack real-power row, which leaves a square
//! `(2n-1) x (2n-1)` system.

mod horizon;
mod jacobian;
mod newton;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{Admittance, Network};

pub use horizon::{
    frobenius_deviation, linearize_horizon, simulate_horizon, HorizonSimulation, InjectionSchedule,
    VoltageTrace,
};
pub use jacobian::{assemble_jacobian, jacobian_blocks, voltage_deviation, JacobianBlocks, JacobianBundle};
pub use newton::{solve_power_flow, solve_power_flow_from, NewtonOptions, PowerFlowSolution};

/// Relative singular-value cutoff for the sensitivity pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("Newton-Raphson did not converge after {iterations} iterations (max mismatch {final_mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, final_mismatch: f64 },
    #[error("bus {bus}: voltage magnitude {v} is not positive")]
    SingularOperatingPoint { bus: usize, v: f64 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("timestep {t}: {source}")]
    AtTimestep {
        t: usize,
        #[source]
        source: Box<PowerFlowError>,
    },
}

impl PowerFlowError {
    pub(crate) fn at(self, t: usize) -> Self {
        PowerFlowError::AtTimestep { t, source: Box::new(self) }
    }
}

/// Bus voltage magnitudes (p.u.) and angles (rad).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl OperatingPoint {
    pub fn flat(n: usize) -> Self {
        Self { v: vec![1.0; n], theta: vec![0.0; n] }
    }

    /// The case's nominal magnitudes and angles, re-referenced so the slack
    /// angle is zero.
    pub fn nominal(net: &Network) -> Self {
        let slack_angle = net.buses()[net.slack()].theta_nominal;
        Self {
            v: net.buses().iter().map(|b| b.v_nominal).collect(),
            theta: net.buses().iter().map(|b| b.theta_nominal - slack_angle).collect(),
        }
    }

    pub(crate) fn check(&self, n: usize) -> Result<(), PowerFlowError> {
        if self.v.len() != n || self.theta.len() != n {
            return Err(PowerFlowError::Dimension { expected: n, found: self.v.len() });
        }
        match self.v.iter().position(|&v| !(v > 0.0)) {
            Some(bus) => Err(PowerFlowError::SingularOperatingPoint { bus, v: self.v[bus] }),
            None => Ok(()),
        }
    }
}

/// Real and reactive injections implied by the operating point.
pub fn calc_injections(y: &Admittance, op: &OperatingPoint) -> (Vec<f64>, Vec<f64>) {
    let n = op.v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for k in 0..n {
            let (g, b) = (y.g[(i, k)], y.b[(i, k)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (op.theta[i] - op.theta[k]).sin_cos();
            let vv = op.v[i] * op.v[k];
            p[i] += vv * (g * c + b * s);
            q[i] += vv * (g * s - b * c);
        }
    }
    (p, q)
}

/// Scheduled injection minus the injection computed at `op`, for every bus
/// (the slack entries are included but carry no constraint).
pub fn ac_residual(
    net: &Network,
    op: &OperatingPoint,
    inj_p: &[f64],
    inj_q: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = calc_injections(net.admittance(), op);
    let mp = inj_p.iter().zip(&p).map(|(s, c)| s - c).collect();
    let mq = inj_q.iter().zip(&q).map(|(s, c)| s - c).collect();
    (mp, mq)
}

/// Largest mismatch over the equations the Newton solver enforces
/// (real and reactive balance at every non-slack bus).
pub fn max_mismatch(net: &Network, mp: &[f64], mq: &[f64]) -> f64 {
    let slack = net.slack();
    mp.iter()
        .zip(mq)
        .enumerate()
        .filter(|(i, _)| *i != slack)
        .map(|(_, (a, b))| a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}

/// Moore-Penrose pseudo-inverse via SVD, discarding singular values below
/// `rel_cutoff` times the largest.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.pseudo_inverse(rel_cutoff * smax).expect("SVD computed with U and V")
}
