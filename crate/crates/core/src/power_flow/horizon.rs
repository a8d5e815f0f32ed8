use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{assemble_jacobian, solve_power_flow_from, JacobianBundle, NewtonOptions, OperatingPoint, PowerFlowError};
use crate::grid::Network;

/// Per-unit bus injections over the horizon, `n x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSchedule {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl InjectionSchedule {
    /// The same injections repeated for `horizon` steps.
    pub fn constant(p: &[f64], q: &[f64], horizon: usize) -> Self {
        Self {
            p: DMatrix::from_fn(p.len(), horizon, |i, _| p[i]),
            q: DMatrix::from_fn(q.len(), horizon, |i, _| q[i]),
        }
    }

    pub fn horizon(&self) -> usize {
        self.p.ncols()
    }

    pub fn p_at(&self, t: usize) -> Vec<f64> {
        self.p.column(t).iter().copied().collect()
    }

    pub fn q_at(&self, t: usize) -> Vec<f64> {
        self.q.column(t).iter().copied().collect()
    }

    fn check(&self, n: usize) -> Result<(), PowerFlowError> {
        for m in [&self.p, &self.q] {
            if m.nrows() != n {
                return Err(PowerFlowError::Dimension { expected: n, found: m.nrows() });
            }
        }
        if self.q.ncols() != self.p.ncols() {
            return Err(PowerFlowError::Dimension { expected: self.p.ncols(), found: self.q.ncols() });
        }
        Ok(())
    }
}

/// Solved voltages, `n x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageTrace {
    pub v: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub converged: Vec<bool>,
}

impl VoltageTrace {
    /// One row per timestep: `t,v_<bus id>...`.
    pub fn write_csv<W: Write>(&self, writer: W, net: &Network) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(net.buses().iter().map(|b| format!("v_{}", b.id)));
        out.write_record(&header)?;
        for t in 0..self.v.ncols() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.v.column(t).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone)]
pub struct HorizonSimulation {
    pub trace: VoltageTrace,
    pub frobenius_deviation: f64,
    pub iterations: Vec<usize>,
}

/// Frobenius norm of the step-to-step magnitude differences of an `n x T`
/// voltage matrix.
pub fn frobenius_deviation(v: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for t in 1..v.ncols() {
        for i in 0..v.nrows() {
            let d = v[(i, t)] - v[(i, t - 1)];
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// Solves every timestep, each warm-started from the previous solution.
fn solve_sequence(
    net: &Network,
    schedule: &InjectionSchedule,
    start: &OperatingPoint,
    steps: usize,
    opts: NewtonOptions,
) -> Result<Vec<(OperatingPoint, usize)>, PowerFlowError> {
    let mut out: Vec<(OperatingPoint, usize)> = Vec::with_capacity(steps);
    for t in 0..steps {
        let warm = out.last().map_or(start, |(op, _)| op);
        let sol = solve_power_flow_from(net, &schedule.p_at(t), &schedule.q_at(t), warm, opts)
            .map_err(|e| e.at(t))?;
        out.push((sol.op, sol.iterations));
    }
    Ok(out)
}

/// One bundle per timestep. Bundle 0 is built at `initial_op`; bundle `t`
/// at the solved operating point of step `t - 1`.
pub fn linearize_horizon(
    net: &Network,
    schedule: &InjectionSchedule,
    initial_op: &OperatingPoint,
    opts: NewtonOptions,
) -> Result<Vec<JacobianBundle>, PowerFlowError> {
    schedule.check(net.n())?;
    let horizon = schedule.horizon();
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let solved = solve_sequence(net, schedule, initial_op, horizon - 1, opts)?;
    let points: Vec<&OperatingPoint> =
        std::iter::once(initial_op).chain(solved.iter().map(|(op, _)| op)).collect();
    points
        .par_iter()
        .enumerate()
        .map(|(t, op)| assemble_jacobian(net, op).map_err(|e| e.at(t)))
        .collect()
}

/// Full nonlinear solve at every timestep, starting from the nominal point.
pub fn simulate_horizon(
    net: &Network,
    schedule: &InjectionSchedule,
    opts: NewtonOptions,
) -> Result<HorizonSimulation, PowerFlowError> {
    schedule.check(net.n())?;
    let horizon = schedule.horizon();
    let solved = solve_sequence(net, schedule, &OperatingPoint::nominal(net), horizon, opts)?;
    let n = net.n();
    let v = DMatrix::from_fn(n, horizon, |i, t| solved[t].0.v[i]);
    let theta = DMatrix::from_fn(n, horizon, |i, t| solved[t].0.theta[i]);
    let frobenius_deviation = frobenius_deviation(&v);
    Ok(HorizonSimulation {
        trace: VoltageTrace { v, theta, converged: vec![true; horizon] },
        frobenius_deviation,
        iterations: solved.iter().map(|(_, it)| *it).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    fn three_bus() -> Network {
        let bus = |id, kind| Bus {
            id,
            kind,
            base_load_p: 0.0,
            base_load_q: 0.0,
            base_gen_p: 0.0,
            base_gen_q: 0.0,
            v_nominal: 1.0,
            theta_nominal: 0.0,
        };
        let line = |a, b| Line { from_bus: a, to_bus: b, conductance_g: 2.0, susceptance_b: -8.0, shunt_b: 0.0 };
        Network::new(
            "three",
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Pq), bus(3, BusKind::Pq)],
            vec![line(1, 2), line(2, 3)],
        )
        .unwrap()
    }

    #[test]
    fn constant_schedule_has_zero_deviation() {
        let net = three_bus();
        let sched = InjectionSchedule::constant(&[0.0, -0.2, -0.1], &[0.0, -0.05, 0.0], 5);
        let sim = simulate_horizon(&net, &sched, NewtonOptions::default()).unwrap();
        assert!(sim.frobenius_deviation < 1e-12);
        assert!(sim.trace.converged.iter().all(|&c| c));
    }

    #[test]
    fn two_steps_is_euclidean() {
        let net = three_bus();
        let mut sched = InjectionSchedule::constant(&[0.0, -0.2, -0.1], &[0.0; 3], 2);
        sched.p[(2, 1)] = -0.3;
        let sim = simulate_horizon(&net, &sched, NewtonOptions::default()).unwrap();
        let d = sim.trace.v.column(1) - sim.trace.v.column(0);
        assert!((sim.frobenius_deviation - d.norm()).abs() < 1e-15);
        assert!(sim.frobenius_deviation > 0.0);
    }

    #[test]
    fn single_step_bundle_at_initial_point() {
        let net = three_bus();
        let sched = InjectionSchedule::constant(&[0.0, -0.2, -0.1], &[0.0; 3], 1);
        let start = OperatingPoint::flat(3);
        let bundles = linearize_horizon(&net, &sched, &start, NewtonOptions::default()).unwrap();
        assert_eq!(bundles.len(), 1);
        assert_eq!(bundles[0].op, start);
    }

    #[test]
    fn failing_step_reports_index() {
        let net = three_bus();
        let mut sched = InjectionSchedule::constant(&[0.0, -0.2, -0.1], &[0.0; 3], 4);
        sched.p[(2, 2)] = -100.0;
        let err = simulate_horizon(&net, &sched, NewtonOptions::default()).unwrap_err();
        assert!(matches!(err, PowerFlowError::AtTimestep { t: 2, .. }));
    }
}
