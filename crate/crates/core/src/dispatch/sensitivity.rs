use nalgebra::{DMatrix, SymmetricEigen};

use super::{build_qp, DispatchError, DispatchProblem, DispatchSolution};

/// Threshold below which both a multiplier and its slack count as zero.
const DEGENERACY_TOL: f64 = 1e-8;

/// Derivative of the optimal net power with respect to the station's own
/// prices, `T x T`, with `[t, s]` the response at step `t` to the price at
/// step `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBlock {
    pub dp_dlambda: DMatrix<f64>,
    /// Steps with a constraint that is weakly active (zero multiplier and
    /// zero slack). Such constraints are treated as inactive, which gives
    /// a one-sided derivative.
    pub degenerate: Vec<usize>,
}

impl SensitivityBlock {
    pub fn zeros(horizon: usize) -> Self {
        Self { dp_dlambda: DMatrix::zeros(horizon, horizon), degenerate: Vec::new() }
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

/// Implicit derivative of the regularised dispatch through its KKT system.
///
/// On the active set the program is an equality-constrained quadratic, so
/// with `Z` spanning the null space of the active rows,
/// `dp/dλ = -1000 dt · C Z (Zᵀ H Z)⁻¹ Zᵀ Cᵀ`, where `C` maps charge to
/// power and `H` is the pulled-back regulariser.
pub fn dispatch_sensitivity(prob: &DispatchProblem, sol: &DispatchSolution) -> Result<SensitivityBlock, DispatchError> {
    prob.validate()?;
    let t_len = prob.horizon();
    let Some(active) = &sol.active else {
        return Ok(SensitivityBlock::zeros(t_len));
    };
    let (space, qp) = build_qp(prob);
    if active.z.len() != qp.rows().len() {
        return Err(DispatchError::InvalidProblem("solution does not belong to this problem".into()));
    }
    let mut rows = Vec::new();
    let mut degenerate = Vec::new();
    for (i, row) in qp.rows().iter().enumerate() {
        let (z, s) = (active.z[i], active.slack[i]);
        if z < DEGENERACY_TOL && s < DEGENERACY_TOL {
            degenerate.push(i / super::soc_space::ROWS_PER_VAR);
        } else if z > s {
            rows.push(row);
        }
    }
    degenerate.dedup();

    let c = space.c_matrix();
    let basis = if rows.is_empty() {
        DMatrix::identity(t_len, t_len)
    } else {
        let mut a = DMatrix::zeros(rows.len(), t_len);
        for (r, row) in rows.iter().enumerate() {
            let norm = row.val.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (&i, &v) in row.idx.iter().zip(&row.val) {
                a[(r, i)] = v / norm;
            }
        }
        let eig = SymmetricEigen::new(a.transpose() * &a);
        let top = eig.eigenvalues.iter().copied().fold(1.0f64, f64::max);
        let keep: Vec<usize> = (0..t_len).filter(|&i| eig.eigenvalues[i] <= 1e-10 * top).collect();
        DMatrix::from_fn(t_len, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])])
    };
    if basis.ncols() == 0 {
        return Ok(SensitivityBlock { dp_dlambda: DMatrix::zeros(t_len, t_len), degenerate });
    }
    let h = qp.hessian().to_dense();
    let reduced = basis.transpose() * &h * &basis;
    let inv = reduced
        .cholesky()
        .ok_or_else(|| DispatchError::InvalidProblem("reduced Hessian is not positive definite".into()))?
        .inverse();
    let cz = &c * &basis;
    let dp_dlambda = (&cz * inv * cz.transpose()) * (-1000.0 * prob.dt_hours);
    Ok(SensitivityBlock { dp_dlambda, degenerate })
}
