//! Battery schedules parameterised by state of charge.
//!
//! Variable `t * k + j` is battery `j`'s state of charge at the end of step
//! `t`. Battery power is then the affine map `p = C x + d` with
//! `p_j(t) = g_j (x(j, t) - x(j, t - 1))`, `g_j = E_j / dt` and the initial
//! charge folded into `d`. Box bounds on the charge stay one-variable rows
//! and power bounds touch two variables `k` apart, so a Hessian that is
//! banded in time stays banded.

use nalgebra::DMatrix;

use crate::linalg::SymBand;
use crate::qp::{QpProblem, SparseRow};

/// Rows added per variable by [`SocSpace::add_bounds`], in order: charge
/// upper, charge lower, power upper, power lower.
pub(crate) const ROWS_PER_VAR: usize = 4;

#[derive(Debug, Clone)]
pub(crate) struct SocSpace {
    k: usize,
    horizon: usize,
    gain: Vec<f64>,
    s0: Vec<f64>,
}

impl SocSpace {
    pub fn new(gain: Vec<f64>, s0: Vec<f64>, horizon: usize) -> Self {
        debug_assert_eq!(gain.len(), s0.len());
        Self { k: gain.len(), horizon, gain, s0 }
    }

    pub fn len(&self) -> usize {
        self.k * self.horizon
    }

    /// Row `r` of `C` and the offset `d_r`.
    pub fn power_row(&self, r: usize) -> (SparseRow, f64) {
        let (j, t) = (r % self.k, r / self.k);
        let g = self.gain[j];
        if t == 0 {
            (SparseRow::new([(r, g)]), -g * self.s0[j])
        } else {
            (SparseRow::new([(r - self.k, -g), (r, g)]), 0.0)
        }
    }

    #[cfg(test)]
    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|r| {
                let (row, d) = self.power_row(r);
                row.dot(x) + d
            })
            .collect()
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut c = DMatrix::zeros(n, n);
        for r in 0..n {
            let (row, _) = self.power_row(r);
            for (&i, &v) in row.idx.iter().zip(&row.val) {
                c[(r, i)] = v;
            }
        }
        c
    }

    fn offsets(&self) -> Vec<f64> {
        (0..self.len()).map(|r| self.power_row(r).1).collect()
    }

    /// `v ↦ Cᵀ v`.
    fn ct_mul(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let g = self.gain[i % self.k];
                let next = if i + self.k < n { v[i + self.k] } else { 0.0 };
                g * (v[i] - next)
            })
            .collect()
    }

    /// Pulls `½ pᵀ H p + gᵀ p` back to the charge variables. The constant
    /// term is dropped.
    pub fn quadratic(&self, h_p: &DMatrix<f64>, g_p: &[f64]) -> (SymBand, Vec<f64>) {
        let n = self.len();
        // Y = H C, column by column.
        let mut y = DMatrix::zeros(n, n);
        for j in 0..n {
            let g = self.gain[j % self.k];
            for i in 0..n {
                let next = if j + self.k < n { h_p[(i, j + self.k)] } else { 0.0 };
                y[(i, j)] = g * (h_p[(i, j)] - next);
            }
        }
        // Cᵀ Y, row by row.
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            let g = self.gain[i % self.k];
            for j in 0..n {
                let next = if i + self.k < n { y[(i + self.k, j)] } else { 0.0 };
                h[(i, j)] = g * (y[(i, j)] - next);
            }
        }
        let d = self.offsets();
        let hd = h_p * nalgebra::DVector::from_vec(d);
        let v: Vec<f64> = (0..n).map(|i| hd[i] + g_p[i]).collect();
        let mut bw = 0;
        for i in 0..n {
            for j in 0..i {
                if h[(i, j)] != 0.0 {
                    bw = bw.max(i - j);
                }
            }
        }
        (SymBand::from_dense(&h, bw), self.ct_mul(&v))
    }

    /// Pulls the linear form `aᵀ p + b` back to `a_sᵀ x + b_s`.
    pub fn linear_form(&self, a_p: &[f64], b: f64) -> (Vec<f64>, f64) {
        let d = self.offsets();
        let b_s = b + a_p.iter().zip(&d).map(|(a, d)| a * d).sum::<f64>();
        (self.ct_mul(a_p), b_s)
    }

    /// Charge in `[0, 1]` and `|p| <= p_max` for every battery and step,
    /// [`ROWS_PER_VAR`] rows per variable in variable order.
    pub fn add_bounds(&self, qp: &mut QpProblem, p_max: &[f64]) {
        for r in 0..self.len() {
            let pm = p_max[r % self.k];
            qp.add_row(SparseRow::new([(r, 1.0)]), 1.0);
            qp.add_row(SparseRow::new([(r, -1.0)]), 0.0);
            let (row, d) = self.power_row(r);
            let neg = SparseRow::new(row.idx.iter().copied().zip(row.val.iter().map(|v| -v)));
            qp.add_row(row, pm - d);
            qp.add_row(neg, pm + d);
        }
    }
}
