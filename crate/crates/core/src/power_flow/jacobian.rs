use nalgebra::{DMatrix, DVector};

use super::{pinv, OperatingPoint, PowerFlowError, PINV_CUTOFF};
use crate::grid::{Admittance, Network};

/// The four `n x n` partial-derivative blocks of the power-flow equations.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub dp_dv: DMatrix<f64>,
    pub dp_dtheta: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
    pub dq_dtheta: DMatrix<f64>,
}

pub fn jacobian_blocks(y: &Admittance, op: &OperatingPoint) -> JacobianBlocks {
    let n = op.v.len();
    let mut dp_dv = DMatrix::zeros(n, n);
    let mut dp_dtheta = DMatrix::zeros(n, n);
    let mut dq_dv = DMatrix::zeros(n, n);
    let mut dq_dtheta = DMatrix::zeros(n, n);
    for i in 0..n {
        let vi = op.v[i];
        dp_dv[(i, i)] = 2.0 * vi * y.g[(i, i)];
        dq_dv[(i, i)] = -2.0 * vi * y.b[(i, i)];
        for k in 0..n {
            if k == i {
                continue;
            }
            let (g, b) = (y.g[(i, k)], y.b[(i, k)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let vk = op.v[k];
            let (s, c) = (op.theta[i] - op.theta[k]).sin_cos();
            let gc_bs = g * c + b * s;
            let gs_bc = g * s - b * c;

            dp_dv[(i, i)] += vk * gc_bs;
            dp_dv[(i, k)] = vi * gc_bs;
            dq_dv[(i, i)] += vk * gs_bc;
            dq_dv[(i, k)] = vi * gs_bc;

            dp_dtheta[(i, i)] += vi * vk * (-g * s + b * c);
            dp_dtheta[(i, k)] = vi * vk * gs_bc;
            dq_dtheta[(i, i)] += vi * vk * gc_bs;
            dq_dtheta[(i, k)] = -vi * vk * gc_bs;
        }
    }
    JacobianBlocks { dp_dv, dp_dtheta, dq_dv, dq_dtheta }
}

/// Linearisation of the power-flow equations at one operating point.
///
/// Row order of `full` is `[P at non-slack buses; Q at all buses]`, column
/// order `[V at all buses; theta at non-slack buses]`. `reduced_cols` is the
/// block of `pinv` that multiplies the real-power entries, so
/// `|reduced_cols * dp|^2` is the deviation for a purely real change, and
/// `sensitivity = reduced_colsᵀ reduced_cols`.
#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub full: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub reduced_cols: DMatrix<f64>,
    pub sensitivity: DMatrix<f64>,
    pub op: OperatingPoint,
    non_slack: Vec<usize>,
}

impl JacobianBundle {
    /// Bus indices matching the real-power rows, in order.
    pub fn non_slack(&self) -> &[usize] {
        &self.non_slack
    }

    /// Row of the real-power block that belongs to bus index `bus`, or
    /// `None` for the slack.
    pub fn p_row(&self, bus: usize) -> Option<usize> {
        self.non_slack.binary_search(&bus).ok()
    }

    /// Stacks `[dp without slack; dq]`.
    pub fn stack(&self, dp: &[f64], dq: &[f64]) -> DVector<f64> {
        let n = dq.len();
        DVector::from_iterator(
            2 * n - 1,
            self.non_slack.iter().map(|&i| dp[i]).chain(dq.iter().copied()),
        )
    }
}

pub fn assemble_jacobian(net: &Network, op: &OperatingPoint) -> Result<JacobianBundle, PowerFlowError> {
    let n = net.n();
    op.check(n)?;
    let blocks = jacobian_blocks(net.admittance(), op);
    let non_slack = net.non_slack();
    let m = 2 * n - 1;
    let mut full = DMatrix::zeros(m, m);
    for (r, &i) in non_slack.iter().enumerate() {
        for k in 0..n {
            full[(r, k)] = blocks.dp_dv[(i, k)];
        }
        for (c, &k) in non_slack.iter().enumerate() {
            full[(r, n + c)] = blocks.dp_dtheta[(i, k)];
        }
    }
    for i in 0..n {
        let r = n - 1 + i;
        for k in 0..n {
            full[(r, k)] = blocks.dq_dv[(i, k)];
        }
        for (c, &k) in non_slack.iter().enumerate() {
            full[(r, n + c)] = blocks.dq_dtheta[(i, k)];
        }
    }
    let pinv = pinv(&full, PINV_CUTOFF);
    let reduced_cols = pinv.columns(0, n - 1).into_owned();
    let sensitivity = reduced_cols.transpose() * &reduced_cols;
    Ok(JacobianBundle { full, pinv, reduced_cols, sensitivity, op: op.clone(), non_slack })
}

/// Squared norm of the linearised state change `J⁺ [dp; dq]`. The slack
/// entry of `dp` is dropped, matching the row removed from the Jacobian.
pub fn voltage_deviation(bundle: &JacobianBundle, dp: &[f64], dq: &[f64]) -> f64 {
    let rhs = bundle.stack(dp, dq);
    (&bundle.pinv * rhs).norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    fn two_bus(g: f64, b: f64) -> Network {
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
        Network::new(
            "two",
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Pq)],
            vec![Line { from_bus: 1, to_bus: 2, conductance_g: g, susceptance_b: b, shunt_b: 0.0 }],
        )
        .unwrap()
    }

    #[test]
    fn lossless_flat_start_has_zero_dp_dv_off_diagonal() {
        let net = two_bus(0.0, -10.0);
        let blocks = jacobian_blocks(net.admittance(), &OperatingPoint::flat(2));
        assert_eq!(blocks.dp_dv[(0, 1)], 0.0);
        assert_eq!(blocks.dp_dv[(1, 0)], 0.0);
    }

    #[test]
    fn reduced_size_and_non_positive_voltage() {
        let net = two_bus(1.0, -5.0);
        let bundle = assemble_jacobian(&net, &OperatingPoint::flat(2)).unwrap();
        assert_eq!(bundle.full.shape(), (3, 3));
        assert_eq!(bundle.reduced_cols.shape(), (3, 1));
        let bad = OperatingPoint { v: vec![1.0, 0.0], theta: vec![0.0; 2] };
        assert!(matches!(
            assemble_jacobian(&net, &bad),
            Err(PowerFlowError::SingularOperatingPoint { bus: 1, .. })
        ));
    }

    #[test]
    fn zero_change_zero_deviation() {
        let net = two_bus(1.0, -5.0);
        let bundle = assemble_jacobian(&net, &OperatingPoint::flat(2)).unwrap();
        assert_eq!(voltage_deviation(&bundle, &[0.0; 2], &[0.0; 2]), 0.0);
        let a = voltage_deviation(&bundle, &[0.0, 0.3], &[0.1, -0.2]);
        let b = voltage_deviation(&bundle, &[0.0, -0.3], &[-0.1, 0.2]);
        assert!((a - b).abs() <= 1e-15 * a);
    }
}
