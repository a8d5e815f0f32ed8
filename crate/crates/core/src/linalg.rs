//! Symmetric banded storage and its Cholesky factorisation.

use nalgebra::DMatrix;

/// Symmetric `n x n` matrix with half-bandwidth `bw`, lower triangle stored
/// row by row: entry `(i, j)`, `j <= i <= j + bw`, lives at
/// `data[i * (bw + 1) + (i - j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    /// Lower band of a dense symmetric matrix; entries outside the band are
    /// dropped.
    pub fn from_dense(m: &DMatrix<f64>, bw: usize) -> Self {
        let n = m.nrows();
        let mut out = Self::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                out.data[i * (bw + 1) + (i - j)] = m[(i, j)];
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Smallest half-bandwidth that holds every nonzero.
    pub fn occupied_bandwidth(&self) -> usize {
        let mut bw = 0;
        for i in 0..self.n {
            for d in (bw + 1..=self.bw.min(i)).rev() {
                if self.data[i * (self.bw + 1) + d] != 0.0 {
                    bw = d;
                    break;
                }
            }
        }
        bw
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        (i - j <= self.bw && i < self.n).then(|| i * (self.bw + 1) + (i - j))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to `(i, j)` (and so to `(j, i)`).
    ///
    /// Panics if the entry is outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).unwrap_or_else(|| panic!("({i}, {j}) outside bandwidth {}", self.bw));
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.bw + 1)] += v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for d in 1..=self.bw.min(i) {
                let j = i - d;
                y[i] += row[d] * x[j];
                y[j] += row[d] * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `L Lᵀ` factorisation, or `None` at the first non-positive pivot.
    pub fn cholesky(&self) -> Option<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = l[j * w];
            for k in lo..j {
                let v = l[j * w + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[j * w] = d;
            for i in j + 1..(j + w).min(n) {
                let mut s = l[i * w + (i - j)];
                for k in i.saturating_sub(bw)..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / d;
            }
        }
        Some(BandCholesky { n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + w).min(self.n) {
                s -= self.l[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_band(n: usize, bw: usize, vals: &[f64]) -> SymBand {
        let mut m = SymBand::zeros(n, bw);
        let mut it = vals.iter().cycle();
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                m.add(i, j, *it.next().unwrap());
            }
        }
        // Diagonal dominance keeps it positive definite.
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| m.get(i, j).abs()).sum();
            m.add(i, i, off + 1.0);
        }
        m
    }

    #[test]
    fn tridiagonal_solve() {
        let mut m = SymBand::zeros(3, 1);
        for i in 0..3 {
            m.add(i, i, 2.0);
        }
        m.add(1, 0, -1.0);
        m.add(2, 1, -1.0);
        let x = m.cholesky().unwrap().solve(&[1.0, 0.0, 1.0]);
        for (a, b) in x.iter().zip([1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_fails() {
        let mut m = SymBand::zeros(2, 1);
        m.add(0, 0, 1.0);
        m.add(1, 1, 1.0);
        m.add(1, 0, 2.0);
        assert!(m.cholesky().is_none());
    }

    #[test]
    #[should_panic]
    fn add_outside_band_panics() {
        SymBand::zeros(4, 1).add(3, 0, 1.0);
    }

    #[test]
    fn occupied_bandwidth_shrinks() {
        let mut m = SymBand::zeros(5, 3);
        m.add(4, 3, 1.0);
        m.add(2, 0, 1.0);
        assert_eq!(m.occupied_bandwidth(), 2);
    }

    proptest! {
        #[test]
        fn matches_dense(n in 1usize..12, bw in 0usize..4, vals in proptest::collection::vec(-1.0f64..1.0, 1..40),
                         b in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let m = random_band(n, bw, &vals);
            let dense = m.to_dense();
            let b = &b[..n];
            let y = m.mul_vec(b);
            let yd = &dense * nalgebra::DVector::from_column_slice(b);
            for i in 0..n {
                prop_assert!((y[i] - yd[i]).abs() < 1e-12);
            }
            let x = m.cholesky().unwrap().solve(b);
            let xd = dense.clone().lu().solve(&nalgebra::DVector::from_column_slice(b)).unwrap();
            for i in 0..n {
                prop_assert!((x[i] - xd[i]).abs() < 1e-10 * (1.0 + xd[i].abs()));
            }
            prop_assert_eq!(SymBand::from_dense(&dense, bw), m);
        }
    }
}
