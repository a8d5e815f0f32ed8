//! Convex quadratic programs with inequality constraints,
//!
//! ```text
//! minimise ½ xᵀ H x + cᵀ x   subject to   G x ≤ h
//! ```
//!
//! solved by a Mehrotra predictor-corrector interior-point method. The
//! variables split into a leading "band" block, on which `H` is banded,
//! and a few trailing "border" variables with no curvature. Constraint rows
//! that stay inside the band are folded into a banded Cholesky factor; any
//! other row is handled by a small bordered elimination, so the cost per
//! iteration stays linear in the band size.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{BandCholesky, SymBand};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("interior point stopped after {iterations} iterations with KKT residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("Newton system could not be solved")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One constraint row as (column, coefficient) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut row = SparseRow::default();
        for (i, v) in entries {
            row.push(i, v);
        }
        row
    }

    pub fn push(&mut self, i: usize, v: f64) {
        if v != 0.0 {
            self.idx.push(i);
            self.val.push(v);
        }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }

    fn axpy_into(&self, a: f64, out: &mut [f64]) {
        for (&i, v) in self.idx.iter().zip(&self.val) {
            out[i] += a * v;
        }
    }

    fn norm_inf(&self) -> f64 {
        self.val.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn scaled(&self, s: f64) -> Self {
        Self { idx: self.idx.clone(), val: self.val.iter().map(|v| v * s).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Stopping tolerance on the scaled residuals.
    pub tol: f64,
    /// Stopping tolerance on the scaled duality gap. Degenerate solutions
    /// are only located to about its square root.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Relative KKT residual the returned point must meet.
    pub kkt_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-11, gap_tol: 1e-16, max_iter: 150, kkt_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Constraint multipliers, one per row.
    pub z: Vec<f64>,
    /// `h - G x`, clamped at zero.
    pub slack: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Multipliers and slacks of the internally normalised problem. Unlike
    /// `z` and `slack` these are on comparable scales, which is what an
    /// active-set decision needs.
    pub scaled_z: Vec<f64>,
    pub scaled_slack: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    hessian: SymBand,
    linear: Vec<f64>,
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
    start: Option<Vec<f64>>,
}

impl QpProblem {
    /// `linear` covers every variable; anything past `hessian.n()` is a
    /// border variable.
    pub fn new(hessian: SymBand, linear: Vec<f64>) -> Result<Self, QpError> {
        if linear.len() < hessian.n() {
            return Err(QpError::Dimension(format!(
                "{} linear terms for a {}-variable Hessian",
                linear.len(),
                hessian.n()
            )));
        }
        Ok(Self { hessian, linear, rows: Vec::new(), rhs: Vec::new(), start: None })
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn n_band(&self) -> usize {
        self.hessian.n()
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn hessian(&self) -> &SymBand {
        &self.hessian
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    /// Adds `row · x ≤ rhs`.
    pub fn add_row(&mut self, row: SparseRow, rhs: f64) {
        debug_assert!(row.idx.iter().all(|&i| i < self.n()));
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    /// Initial primal guess; it need not be feasible.
    pub fn set_start(&mut self, x: Vec<f64>) {
        self.start = Some(x);
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let hx = self.hessian.mul_vec(&x[..self.n_band()]);
        0.5 * hx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            + self.linear.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Relative KKT residual of `(x, z)`: the worst of stationarity, primal
    /// feasibility, dual sign and complementarity, each scaled by the size
    /// of the terms involved.
    pub fn kkt_residual(&self, x: &[f64], z: &[f64]) -> f64 {
        let nb = self.n_band();
        let mut grad = self.hessian.mul_vec(&x[..nb]);
        grad.resize(self.n(), 0.0);
        let hx_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let c_norm = self.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (g, c) in grad.iter_mut().zip(&self.linear) {
            *g += c;
        }
        let mut gtz = vec![0.0; self.n()];
        for (row, &zi) in self.rows.iter().zip(z) {
            row.axpy_into(zi, &mut gtz);
        }
        let gtz_norm = gtz.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let stat = grad.iter().zip(&gtz).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()))
            / (1.0 + hx_norm.max(c_norm).max(gtz_norm));

        let mut primal = 0.0f64;
        let mut comp = 0.0f64;
        let mut dual = 0.0f64;
        for ((row, &h), &zi) in self.rows.iter().zip(&self.rhs).zip(z) {
            let scale = row.norm_inf().max(f64::MIN_POSITIVE);
            let viol = (row.dot(x) - h) / scale;
            primal = primal.max(viol / (1.0 + h.abs() / scale));
            let slack = (-viol).max(0.0);
            comp = comp.max(zi.max(0.0) * scale * slack);
            dual = dual.max(-zi);
        }
        let obj = self.objective(x).abs();
        stat.max(primal).max(dual / (1.0 + gtz_norm)).max(comp / (1.0 + obj))
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<QpSolution, QpError> {
        let scaled = Scaled::new(self);
        let (x, scaled_z, iterations) = scaled.run(opts)?;
        let z: Vec<f64> =
            scaled_z.iter().zip(&scaled.row_scale).map(|(z, r)| z * r / scaled.obj_scale).collect();
        let scaled_slack = scaled.rows.iter().zip(&scaled.h).map(|(r, h)| (h - r.dot(&x)).max(0.0)).collect();
        let slack = self.rows.iter().zip(&self.rhs).map(|(r, h)| (h - r.dot(&x)).max(0.0)).collect();
        let kkt_residual = self.kkt_residual(&x, &z);
        if !(kkt_residual <= opts.kkt_tol) {
            return Err(QpError::NotConverged { iterations, residual: kkt_residual });
        }
        Ok(QpSolution {
            objective: self.objective(&x),
            x,
            z,
            slack,
            iterations,
            kkt_residual,
            scaled_z,
            scaled_slack,
        })
    }
}

/// The problem after objective and row normalisation.
struct Scaled {
    n: usize,
    nb: usize,
    hessian: SymBand,
    c: Vec<f64>,
    rows: Vec<SparseRow>,
    h: Vec<f64>,
    band_rows: Vec<usize>,
    dense_rows: Vec<usize>,
    row_scale: Vec<f64>,
    obj_scale: f64,
    start: Vec<f64>,
}

impl Scaled {
    fn new(p: &QpProblem) -> Self {
        let n = p.n();
        let nb = p.n_band();
        let c_max = p.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let obj_scale = 1.0 / c_max.max(p.hessian.max_abs()).max(1.0);
        let mut hessian = p.hessian.clone();
        for i in 0..nb {
            for j in i.saturating_sub(hessian.bandwidth())..=i {
                let v = hessian.get(i, j);
                if v != 0.0 {
                    hessian.add(i, j, v * (obj_scale - 1.0));
                }
            }
        }
        let c = p.linear.iter().map(|v| v * obj_scale).collect();
        let mut rows = Vec::with_capacity(p.rows.len());
        let mut h = Vec::with_capacity(p.rows.len());
        let mut row_scale = Vec::with_capacity(p.rows.len());
        for (row, &rhs) in p.rows.iter().zip(&p.rhs) {
            let s = 1.0 / row.norm_inf().max(f64::MIN_POSITIVE);
            rows.push(row.scaled(s));
            h.push(rhs * s);
            row_scale.push(s);
        }
        let bw = hessian.bandwidth().max(1);
        let (mut band_rows, mut dense_rows) = (Vec::new(), Vec::new());
        for (i, row) in rows.iter().enumerate() {
            let lo = row.idx.iter().copied().min().unwrap_or(0);
            let hi = row.idx.iter().copied().max().unwrap_or(0);
            if hi < nb && hi - lo <= bw && !row.idx.is_empty() {
                band_rows.push(i);
            } else {
                dense_rows.push(i);
            }
        }
        if hessian.bandwidth() < bw && !band_rows.is_empty() {
            let mut wider = SymBand::zeros(nb, bw);
            for i in 0..nb {
                for j in i.saturating_sub(hessian.bandwidth())..=i {
                    wider.add(i, j, hessian.get(i, j));
                }
            }
            hessian = wider;
        }
        let start = p.start.clone().filter(|s| s.len() == n).unwrap_or_else(|| vec![0.0; n]);
        Self { n, nb, hessian, c, rows, h, band_rows, dense_rows, row_scale, obj_scale, start }
    }

    fn g_mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(x)).collect()
    }

    fn gt_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, &yi) in self.rows.iter().zip(y) {
            if yi != 0.0 {
                r.axpy_into(yi, &mut out);
            }
        }
        out
    }

    fn h_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.hessian.mul_vec(&x[..self.nb]);
        out.resize(self.n, 0.0);
        out
    }

    fn run(&self, opts: &QpOptions) -> Result<(Vec<f64>, Vec<f64>, usize), QpError> {
        let m = self.rows.len();
        let mut x = self.start.clone();
        if m == 0 {
            let sys = NormalSystem::build(self, &[])?;
            let rhs: Vec<f64> = self.c.iter().map(|v| -v).collect();
            x = sys.solve(self, &[], &rhs);
            return Ok((x, Vec::new(), 1));
        }
        let gx = self.g_mul(&x);
        let mut s: Vec<f64> = gx.iter().zip(&self.h).map(|(g, h)| (h - g).max(1.0)).collect();
        let mut z = vec![1.0; m];
        let c_norm = self.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let h_norm = self.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        let mut fallback = (f64::INFINITY, x.clone(), z.clone(), 0);

        for iter in 0..opts.max_iter {
            let hx = self.h_mul(&x);
            let gtz = self.gt_mul(&z);
            let r_d: Vec<f64> = (0..self.n).map(|i| hx[i] + self.c[i] + gtz[i]).collect();
            let gx = self.g_mul(&x);
            let r_p: Vec<f64> = (0..m).map(|i| gx[i] + s[i] - self.h[i]).collect();
            let gap: f64 = s.iter().zip(&z).map(|(a, b)| a * b).sum();
            let mu = gap / m as f64;
            let obj = 0.5 * hx.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                + self.c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            let rd_norm = r_d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let rp_norm = r_p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            // Residuals measured against their targets.
            let merit = (rd_norm / (opts.tol * (1.0 + c_norm)))
                .max(rp_norm / (opts.tol * (1.0 + h_norm)))
                .max(gap / (opts.gap_tol * (1.0 + obj.abs())));
            if merit <= 1.0 {
                return Ok((x, z, iter));
            }
            if merit < best {
                best = merit;
                since_best = 0;
            } else {
                since_best += 1;
            }
            // If the targets are out of reach, the iterate handed back is
            // the one with the smallest residuals on a common scale.
            let balanced = rd_norm / (1.0 + c_norm) + rp_norm / (1.0 + h_norm) + gap / (1.0 + obj.abs());
            if balanced < fallback.0 {
                fallback = (balanced, x.clone(), z.clone(), iter);
            }
            if since_best >= 4 {
                break;
            }

            let w: Vec<f64> = (0..m).map(|i| z[i] / s[i]).collect();
            // Near the end the scaling z/s spans many decades; if the Newton
            // system breaks down, fall back to the best iterate so far and
            // let the caller's KKT check decide.
            let sys = match NormalSystem::build(self, &w) {
                Ok(sys) => sys,
                Err(_) if iter > 0 => break,
                Err(e) => return Err(e),
            };

            let direction = |r_c: &[f64]| {
                let tmp: Vec<f64> = (0..m).map(|i| (r_c[i] - z[i] * r_p[i]) / s[i]).collect();
                let gt = self.gt_mul(&tmp);
                let rhs: Vec<f64> = (0..self.n).map(|i| -r_d[i] + gt[i]).collect();
                let dx = sys.solve(self, &w, &rhs);
                let gdx = self.g_mul(&dx);
                let ds: Vec<f64> = (0..m).map(|i| -r_p[i] - gdx[i]).collect();
                let dz: Vec<f64> = (0..m).map(|i| (-r_c[i] - z[i] * ds[i]) / s[i]).collect();
                (dx, ds, dz)
            };
            let max_step = |ds: &[f64], dz: &[f64]| {
                let mut a = 1.0f64;
                for i in 0..m {
                    if ds[i] < 0.0 {
                        a = a.min(-s[i] / ds[i]);
                    }
                    if dz[i] < 0.0 {
                        a = a.min(-z[i] / dz[i]);
                    }
                }
                a
            };

            let r_c_aff: Vec<f64> = (0..m).map(|i| s[i] * z[i]).collect();
            let (_, ds_a, dz_a) = direction(&r_c_aff);
            let a_aff = max_step(&ds_a, &dz_a);
            let mu_aff = (0..m).map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i])).sum::<f64>() / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let r_c: Vec<f64> = (0..m).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu).collect();
            let (dx, ds, dz) = direction(&r_c);
            let a = (0.995 * max_step(&ds, &dz)).min(1.0);
            for i in 0..self.n {
                x[i] += a * dx[i];
            }
            for i in 0..m {
                s[i] = (s[i] + a * ds[i]).max(1e-300);
                z[i] = (z[i] + a * dz[i]).max(1e-300);
            }
            if x.iter().chain(&z).any(|v| !v.is_finite()) {
                break;
            }
        }
        if !fallback.0.is_finite() {
            return Err(QpError::Singular);
        }
        Ok((fallback.1, fallback.2, fallback.3))
    }
}

/// Factorisation of `H + Gᵀ W G` split into a band block and a border.
struct NormalSystem {
    chol: Option<BandCholesky>,
    /// `B⁻¹ U`, `nb x r`.
    binv_u: DMatrix<f64>,
    u: DMatrix<f64>,
    border: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    q: usize,
    r: usize,
}

impl NormalSystem {
    fn build(p: &Scaled, w: &[f64]) -> Result<Self, QpError> {
        let nb = p.nb;
        let q = p.n - nb;
        let mut b = p.hessian.clone();
        for &i in &p.band_rows {
            let row = &p.rows[i];
            for (a, (&ia, &va)) in row.idx.iter().zip(&row.val).enumerate() {
                for (&ib, &vb) in row.idx.iter().zip(&row.val).take(a + 1) {
                    b.add(ia, ib, w[i] * va * vb);
                }
            }
        }
        let chol = if nb == 0 {
            None
        } else {
            let mut reg = 0.0;
            let base = b.max_abs().max(1e-300);
            loop {
                let mut trial = b.clone();
                if reg > 0.0 {
                    trial.add_diagonal(reg);
                }
                if let Some(c) = trial.cholesky() {
                    break Some(c);
                }
                reg = if reg == 0.0 { 1e-14 * base } else { reg * 100.0 };
                if reg > base {
                    return Err(QpError::Singular);
                }
            }
        };

        let dense: Vec<usize> = if w.is_empty() { Vec::new() } else { p.dense_rows.clone() };
        let r = dense.len();
        let mut u = DMatrix::zeros(nb, r);
        let mut v = DMatrix::zeros(q, r);
        for (j, &i) in dense.iter().enumerate() {
            let sw = w[i].sqrt();
            let row = &p.rows[i];
            for (&k, &val) in row.idx.iter().zip(&row.val) {
                if k < nb {
                    u[(k, j)] += sw * val;
                } else {
                    v[(k - nb, j)] += sw * val;
                }
            }
        }
        let mut binv_u = u.clone();
        if let Some(c) = &chol {
            for j in 0..r {
                let mut col: Vec<f64> = binv_u.column(j).iter().copied().collect();
                c.solve_in_place(&mut col);
                binv_u.set_column(j, &DVector::from_vec(col));
            }
        }
        let border = if q + r == 0 {
            None
        } else {
            let cmat = DMatrix::<f64>::identity(r, r) + u.transpose() * &binv_u;
            let mut k = DMatrix::zeros(q + r, q + r);
            k.view_mut((0, q), (q, r)).copy_from(&v);
            k.view_mut((q, 0), (r, q)).copy_from(&(-v.transpose()));
            k.view_mut((q, q), (r, r)).copy_from(&cmat);
            let lu = k.lu();
            if !lu.is_invertible() {
                return Err(QpError::Singular);
            }
            Some(lu)
        };
        Ok(Self { chol, binv_u, u, border, q, r })
    }

    fn solve_once(&self, nb: usize, rhs: &[f64]) -> Vec<f64> {
        let (q, r) = (self.q, self.r);
        let mut xs = rhs[..nb].to_vec();
        if let Some(c) = &self.chol {
            c.solve_in_place(&mut xs);
        }
        let mut out = vec![0.0; nb + q];
        if let Some(lu) = &self.border {
            let mut b = DVector::zeros(q + r);
            for i in 0..q {
                b[i] = rhs[nb + i];
            }
            let ut_xs = self.u.transpose() * DVector::from_column_slice(&xs);
            for j in 0..r {
                b[q + j] = ut_xs[j];
            }
            let sol = lu.solve(&b).unwrap_or_else(|| DVector::zeros(q + r));
            let wv = sol.rows(q, r);
            let corr = &self.binv_u * wv;
            for i in 0..nb {
                out[i] = xs[i] - corr[i];
            }
            for i in 0..q {
                out[nb + i] = sol[i];
            }
        } else {
            out[..nb].copy_from_slice(&xs);
        }
        out
    }

    /// Solve with two rounds of iterative refinement against the exact
    /// normal-matrix product.
    fn solve(&self, p: &Scaled, w: &[f64], rhs: &[f64]) -> Vec<f64> {
        let mut x = self.solve_once(p.nb, rhs);
        for _ in 0..2 {
            let hx = p.h_mul(&x);
            let gx = p.g_mul(&x);
            let wgx: Vec<f64> = gx.iter().zip(w).map(|(a, b)| a * b).collect();
            let gt = p.gt_mul(&wgx);
            let res: Vec<f64> = (0..p.n).map(|i| rhs[i] - hx[i] - gt[i]).collect();
            let dx = self.solve_once(p.nb, &res);
            for i in 0..p.n {
                x[i] += dx[i];
            }
        }
        x
    }
}
