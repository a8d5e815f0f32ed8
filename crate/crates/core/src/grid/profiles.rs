//! EV charging load profiles: CSV ingestion and a seeded synthetic generator.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GridError, StationConfig};

/// Per-station real-power charging demand, MW, one value per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadForecast {
    pub station_id: u32,
    pub values: Vec<f64>,
}

impl LoadForecast {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }
}

/// Reads `station_id,t0,...,t{T-1}` rows and returns them in the order of
/// `stations`. An empty `stations` slice skips the station matching and
/// returns rows in file order.
pub fn parse_profiles(
    path: impl AsRef<Path>,
    horizon: usize,
    stations: &[StationConfig],
) -> Result<Vec<LoadForecast>, GridError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| GridError::MalformedFile(format!("{}: {e}", path.display())))?;
    read_profiles(file, horizon, stations)
}

pub fn read_profiles<R: Read>(
    reader: R,
    horizon: usize,
    stations: &[StationConfig],
) -> Result<Vec<LoadForecast>, GridError> {
    let mut csv = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers().map_err(|e| GridError::MalformedFile(e.to_string()))?.clone();
    if header.get(0) != Some("station_id") {
        return Err(GridError::MalformedFile("first column must be station_id".into()));
    }
    let mut rows = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| GridError::MalformedFile(e.to_string()))?;
        let station_field = record.get(0).unwrap_or_default();
        if record.len() != horizon + 1 {
            return Err(GridError::RaggedRow {
                row,
                station: station_field.to_string(),
                expected: horizon,
                found: record.len().saturating_sub(1),
            });
        }
        let station_id: u32 = station_field
            .parse()
            .map_err(|_| GridError::MalformedFile(format!("row {row}: bad station id {station_field:?}")))?;
        let values = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(t, s)| {
                let v: f64 = s.parse().map_err(|_| {
                    GridError::MalformedFile(format!("row {row}, t{t}: not a number: {s:?}"))
                })?;
                if v < 0.0 || !v.is_finite() {
                    return Err(GridError::NegativeLoad { station: station_id, t, value: v });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(LoadForecast { station_id, values });
    }
    if stations.is_empty() {
        return Ok(rows);
    }
    if let Some(extra) = rows.iter().find(|r| !stations.iter().any(|s| s.station_id == r.station_id)) {
        return Err(GridError::UnknownStation(extra.station_id));
    }
    stations
        .iter()
        .map(|s| {
            rows.iter()
                .find(|r| r.station_id == s.station_id)
                .cloned()
                .ok_or(GridError::MissingProfile(s.station_id))
        })
        .collect()
}

pub fn write_profiles<W: Write>(writer: W, forecasts: &[LoadForecast]) -> Result<(), GridError> {
    let mut out = csv::Writer::from_writer(writer);
    let horizon = forecasts.first().map_or(0, LoadForecast::horizon);
    let mut header = vec!["station_id".to_string()];
    header.extend((0..horizon).map(|t| format!("t{t}")));
    let csv_err = |e: csv::Error| GridError::MalformedFile(e.to_string());
    out.write_record(&header).map_err(csv_err)?;
    for f in forecasts {
        let mut rec = vec![f.station_id.to_string()];
        rec.extend(f.values.iter().map(|v| v.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Seeded stand-in for measured charging demand: each station's profile is
/// a sum of Gaussian charging sessions (morning and evening arrival waves)
/// rescaled so that its maximum is exactly `peak_mw[k]`.
///
/// Panics if `peak_mw` and `stations` differ in length.
pub fn synth_profiles(
    seed: u64,
    stations: &[StationConfig],
    peak_mw: &[f64],
    horizon: usize,
) -> Vec<LoadForecast> {
    assert_eq!(stations.len(), peak_mw.len(), "one peak per station");
    let morning = Normal::new(9.0, 1.5).expect("valid normal");
    let evening = Normal::new(18.0, 2.0).expect("valid normal");
    stations
        .iter()
        .zip(peak_mw)
        .enumerate()
        .map(|(k, (station, &peak))| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
            );
            let sessions = 6 + rng.random_range(0..6);
            let mut values = vec![0.0; horizon];
            for _ in 0..sessions {
                let center = if rng.random_bool(0.35) {
                    morning.sample(&mut rng)
                } else {
                    evening.sample(&mut rng)
                };
                let width = rng.random_range(0.5..2.0);
                let amplitude = rng.random_range(0.4..1.0);
                for (t, v) in values.iter_mut().enumerate() {
                    let hour = (t as f64 + 0.5) * 24.0 / horizon as f64;
                    let z = (hour - center) / width;
                    *v += amplitude * (-0.5 * z * z).exp();
                }
            }
            for v in values.iter_mut() {
                *v = v.max(0.0);
            }
            let (argmax, max) = values
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0), |acc, (t, v)| if v > acc.1 { (t, v) } else { acc });
            if max > 0.0 && peak > 0.0 {
                let scale = peak / max;
                values.iter_mut().for_each(|v| *v *= scale);
                values[argmax] = peak;
            } else {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
            LoadForecast { station_id: station.station_id, values }
        })
        .collect()
}
