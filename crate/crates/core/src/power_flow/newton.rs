use nalgebra::{DMatrix, DVector};

use super::{ac_residual, jacobian_blocks, max_mismatch, OperatingPoint, PowerFlowError};
use crate::grid::Network;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Convergence threshold on the largest per-unit mismatch.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub op: OperatingPoint,
    /// Number of mismatch evaluations, so an exact starting point counts as one.
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Newton-Raphson from the case's nominal operating point.
pub fn solve_power_flow(
    net: &Network,
    inj_p: &[f64],
    inj_q: &[f64],
    opts: NewtonOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_power_flow_from(net, inj_p, inj_q, &OperatingPoint::nominal(net), opts)
}

/// Newton-Raphson from an explicit starting point. The slack magnitude is
/// taken from `start` and held fixed; the slack angle is pinned to zero.
pub fn solve_power_flow_from(
    net: &Network,
    inj_p: &[f64],
    inj_q: &[f64],
    start: &OperatingPoint,
    opts: NewtonOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n();
    for len in [inj_p.len(), inj_q.len()] {
        if len != n {
            return Err(PowerFlowError::Dimension { expected: n, found: len });
        }
    }
    start.check(n)?;
    let slack = net.slack();
    let pq = net.non_slack();
    let m = pq.len();
    let mut op = start.clone();
    op.theta[slack] = 0.0;

    let mut best = f64::INFINITY;
    let mut last = f64::INFINITY;
    for iter in 1..=opts.max_iter + 1 {
        let (mp, mq) = ac_residual(net, &op, inj_p, inj_q);
        let mis = max_mismatch(net, &mp, &mq);
        last = mis;
        if !mis.is_finite() {
            break;
        }
        if mis < opts.tol {
            return Ok(PowerFlowSolution { op, iterations: iter, max_mismatch: mis });
        }
        if mis > 10.0 * best || iter > opts.max_iter {
            break;
        }
        best = best.min(mis);

        let blocks = jacobian_blocks(net.admittance(), &op);
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, c)] = blocks.dp_dtheta[(i, k)];
                jac[(r, m + c)] = blocks.dp_dv[(i, k)];
                jac[(m + r, c)] = blocks.dq_dtheta[(i, k)];
                jac[(m + r, m + c)] = blocks.dq_dv[(i, k)];
            }
        }
        let rhs = DVector::from_iterator(2 * m, pq.iter().map(|&i| mp[i]).chain(pq.iter().map(|&i| mq[i])));
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        for (r, &i) in pq.iter().enumerate() {
            op.theta[i] += step[r];
            op.v[i] += step[m + r];
        }
        if op.v.iter().any(|&v| !(v > 0.0)) {
            break;
        }
    }
    Err(PowerFlowError::NonConvergence { iterations: opts.max_iter, final_mismatch: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    fn two_bus(load: f64) -> Network {
        let bus = |id, kind, p| Bus {
            id,
            kind,
            base_load_p: p,
            base_load_q: 0.0,
            base_gen_p: 0.0,
            base_gen_q: 0.0,
            v_nominal: 1.0,
            theta_nominal: 0.0,
        };
        Network::new(
            "two",
            100.0,
            vec![bus(1, BusKind::Slack, 0.0), bus(2, BusKind::Pq, load)],
            vec![Line { from_bus: 1, to_bus: 2, conductance_g: 1.0, susceptance_b: -10.0, shunt_b: 0.0 }],
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_is_flat_in_one_pass() {
        let net = two_bus(0.0);
        let sol = solve_power_flow(&net, &[0.0; 2], &[0.0; 2], NewtonOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.op, OperatingPoint::flat(2));
    }

    #[test]
    fn loaded_two_bus_converges_and_certifies() {
        let net = two_bus(50.0);
        let (p, q) = net.base_injections();
        let sol = solve_power_flow(&net, &p, &q, NewtonOptions::default()).unwrap();
        let (mp, mq) = ac_residual(&net, &sol.op, &p, &q);
        assert!(max_mismatch(&net, &mp, &mq) < 1e-10);
        assert!(sol.op.v[1] < 1.0);
        assert!(sol.op.theta[1] < 0.0);
        assert_eq!(sol.op.theta[0], 0.0);
    }

    #[test]
    fn huge_load_does_not_converge() {
        let net = two_bus(0.0);
        let err = solve_power_flow(&net, &[0.0, -100.0], &[0.0; 2], NewtonOptions::default()).unwrap_err();
        assert!(matches!(err, PowerFlowError::NonConvergence { .. }));
    }
}
