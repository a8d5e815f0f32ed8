//! Economic burden and the equity penalty.
//!
//! A station's burden is the sum of its prices over the horizon and equity
//! is `Γ = min_k burden_k - max_k burden_k`, so `Γ <= 0` with equality
//! exactly when every station carries the same burden.

use std::io::Write;

use nalgebra::DMatrix;

use crate::qp::SparseRow;

/// Station prices, `K x T`, $/kWh.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceMatrix {
    pub values: DMatrix<f64>,
    pub station_ids: Vec<u32>,
}

impl PriceMatrix {
    pub fn new(values: DMatrix<f64>, station_ids: Vec<u32>) -> Self {
        assert_eq!(values.nrows(), station_ids.len(), "one row per station");
        Self { values, station_ids }
    }

    /// Every station on the same schedule.
    pub fn uniform(row: &[f64], station_ids: Vec<u32>) -> Self {
        let values = DMatrix::from_fn(station_ids.len(), row.len(), |_, t| row[t]);
        Self { values, station_ids }
    }

    pub fn stations(&self) -> usize {
        self.values.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.values.row(k).iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `station_id,t0,t1,...`, one row per station.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["station_id".to_string()];
        header.extend((0..self.horizon()).map(|t| format!("t{t}")));
        out.write_record(&header)?;
        for (k, id) in self.station_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.values.row(k).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()
    }
}

pub fn burden(prices: &PriceMatrix) -> Vec<f64> {
    prices.values.row_iter().map(|r| r.iter().sum()).collect()
}

/// Indices of the lowest and highest burden, ties to the lowest index.
pub fn extreme_stations(burdens: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (k, &b) in burdens.iter().enumerate() {
        if b < burdens[lo] {
            lo = k;
        }
        if b > burdens[hi] {
            hi = k;
        }
    }
    (lo, hi)
}

pub fn gamma(prices: &PriceMatrix) -> f64 {
    gamma_of_burdens(&burden(prices))
}

pub fn gamma_of_burdens(burdens: &[f64]) -> f64 {
    if burdens.is_empty() {
        return 0.0;
    }
    let (lo, hi) = extreme_stations(burdens);
    burdens[lo] - burdens[hi]
}

/// An affine expression `coeffs · x + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm {
    pub coeffs: SparseRow,
    pub constant: f64,
}

impl LinearForm {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.dot(x) + self.constant
    }
}

/// Epigraph encoding of `-Γ` for a convex program: two extra scalars `u`
/// and `l` with `u >= B_k` and `l <= B_k` for every station, and `-Γ`
/// replaced by `u - l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpigraphTerms {
    pub stations: usize,
}

pub fn gamma_epigraph_terms(stations: usize) -> EpigraphTerms {
    assert!(stations >= 1, "need at least one station");
    EpigraphTerms { stations }
}

impl EpigraphTerms {
    /// Objective coefficients on `(u, l)`.
    pub const OBJECTIVE: [f64; 2] = [1.0, -1.0];

    /// Inequality rows `row · [x, u, l] <= rhs` with `u` at index `u_idx`
    /// and `l` at `u_idx + 1`: `B_k - u <= 0` then `l - B_k <= 0`, per
    /// station.
    pub fn rows(&self, burdens: &[LinearForm], u_idx: usize) -> Vec<(SparseRow, f64)> {
        assert_eq!(burdens.len(), self.stations);
        let l_idx = u_idx + 1;
        let mut out = Vec::with_capacity(2 * self.stations);
        for b in burdens {
            let c = &b.coeffs;
            let upper = c.idx.iter().copied().zip(c.val.iter().copied()).chain([(u_idx, -1.0)]);
            out.push((SparseRow::new(upper), -b.constant));
            let lower = c.idx.iter().copied().zip(c.val.iter().map(|v| -v)).chain([(l_idx, 1.0)]);
            out.push((SparseRow::new(lower), b.constant));
        }
        out
    }

    /// A point satisfying every row: `u = max`, `l = min`.
    pub fn feasible_point(&self, burdens: &[f64]) -> (f64, f64) {
        let (lo, hi) = extreme_stations(burdens);
        (burdens[hi], burdens[lo])
    }
}
