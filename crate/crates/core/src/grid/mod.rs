//! Network, station and load-profile data.
//!
//! All power quantities on [`Bus`] are stored in MW / MVAr exactly as they
//! appear in the case file. Conversion to per-unit happens through
//! [`Network::base_injections`] and [`Network::base_mva`]; injections are
//! net generation minus load everywhere in this crate.

mod case;
mod profiles;

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use case::{parse_case, parse_case_str, CaseBus, CaseFile, CaseLine};
pub use profiles::{parse_profiles, read_profiles, synth_profiles, write_profiles, LoadForecast};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("case has no slack bus")]
    MissingSlack,
    #[error("buses {first} and {second} are both marked slack")]
    DuplicateSlack { first: usize, second: usize },
    #[error("bus id {0} appears more than once")]
    DuplicateBusId(usize),
    #[error("line {line} references unknown bus {bus}")]
    DanglingLineEndpoint { line: usize, bus: usize },
    #[error("line {line} connects bus {bus} to itself")]
    SelfLoop { line: usize, bus: usize },
    #[error("bus {bus}: nominal voltage {v} must be positive")]
    NonPositiveVoltage { bus: usize, v: f64 },
    #[error("network needs at least two buses, found {0}")]
    TooFewBuses(usize),
    #[error("base MVA must be positive, got {0}")]
    BadBase(f64),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("profile row {row} (station {station}): expected {expected} values, found {found}")]
    RaggedRow { row: usize, station: String, expected: usize, found: usize },
    #[error("station {station}, t{t}: negative load {value} MW")]
    NegativeLoad { station: u32, t: usize, value: f64 },
    #[error("profile for unknown station {0}")]
    UnknownStation(u32),
    #[error("no load profile for station {0}")]
    MissingProfile(u32),
    #[error("station {station}: {reason}")]
    BadStation { station: u32, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Case identifier, 1-based in the shipped cases.
    pub id: usize,
    pub kind: BusKind,
    pub base_load_p: f64,
    pub base_load_q: f64,
    pub base_gen_p: f64,
    pub base_gen_q: f64,
    /// Per-unit magnitude of the nominal operating point.
    pub v_nominal: f64,
    /// Radians.
    pub theta_nominal: f64,
}

/// A pi-model branch. `conductance_g` and `susceptance_b` are the series
/// admittance in per-unit; `shunt_b` is the total charging susceptance,
/// split equally between the two ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub conductance_g: f64,
    pub susceptance_b: f64,
    pub shunt_b: f64,
}

/// Real and imaginary parts of the bus admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// A validated network. Immutable once built; the admittance matrices are
/// assembled at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    name: String,
    base_mva: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index: HashMap<usize, usize>,
    slack: usize,
    admittance: Admittance,
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
    ) -> Result<Self, GridError> {
        if !(base_mva > 0.0) {
            return Err(GridError::BadBase(base_mva));
        }
        if buses.len() < 2 {
            return Err(GridError::TooFewBuses(buses.len()));
        }
        let mut index = HashMap::with_capacity(buses.len());
        let mut slack: Option<usize> = None;
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return Err(GridError::DuplicateBusId(bus.id));
            }
            if !(bus.v_nominal > 0.0) {
                return Err(GridError::NonPositiveVoltage { bus: bus.id, v: bus.v_nominal });
            }
            if bus.kind == BusKind::Slack {
                if let Some(first) = slack {
                    return Err(GridError::DuplicateSlack {
                        first: buses[first].id,
                        second: bus.id,
                    });
                }
                slack = Some(i);
            }
        }
        let slack = slack.ok_or(GridError::MissingSlack)?;
        for (k, line) in lines.iter().enumerate() {
            for bus in [line.from_bus, line.to_bus] {
                if !index.contains_key(&bus) {
                    return Err(GridError::DanglingLineEndpoint { line: k, bus });
                }
            }
            if line.from_bus == line.to_bus {
                return Err(GridError::SelfLoop { line: k, bus: line.from_bus });
            }
        }
        let admittance = assemble_admittance(buses.len(), &lines, &index);
        Ok(Self { name: name.into(), base_mva, buses, lines, index, slack, admittance })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Position of the slack bus in [`Network::buses`].
    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Indices of all buses except the slack, in bus order.
    pub fn non_slack(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| i != self.slack).collect()
    }

    pub fn admittance(&self) -> &Admittance {
        &self.admittance
    }

    /// Net per-unit injections (generation minus load) of the base case.
    pub fn base_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.buses.iter().map(|b| (b.base_gen_p - b.base_load_p) / self.base_mva);
        let q = self.buses.iter().map(|b| (b.base_gen_q - b.base_load_q) / self.base_mva);
        (p.collect(), q.collect())
    }
}

/// Bus admittance matrix split into conductance and susceptance parts.
pub fn build_admittance(net: &Network) -> Admittance {
    net.admittance.clone()
}

fn assemble_admittance(n: usize, lines: &[Line], index: &HashMap<usize, usize>) -> Admittance {
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for line in lines {
        let i = index[&line.from_bus];
        let k = index[&line.to_bus];
        g[(i, k)] -= line.conductance_g;
        g[(k, i)] -= line.conductance_g;
        g[(i, i)] += line.conductance_g;
        g[(k, k)] += line.conductance_g;
        b[(i, k)] -= line.susceptance_b;
        b[(k, i)] -= line.susceptance_b;
        b[(i, i)] += line.susceptance_b + 0.5 * line.shunt_b;
        b[(k, k)] += line.susceptance_b + 0.5 * line.shunt_b;
    }
    Admittance { g, b }
}

/// A charging station with a collocated stationary battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub station_id: u32,
    pub bus_id: usize,
    /// Battery energy capacity, MWh.
    pub capacity_mwh: f64,
    /// Initial state of charge, fraction of capacity.
    pub soc_init: f64,
    /// Power limit in MW; defaults to the 1C rate (capacity over one hour).
    #[serde(default, rename = "p_max_mw", skip_serializing_if = "Option::is_none")]
    pub p_max_override: Option<f64>,
}

impl StationConfig {
    pub fn new(station_id: u32, bus_id: usize, capacity_mwh: f64, soc_init: f64) -> Self {
        Self { station_id, bus_id, capacity_mwh, soc_init, p_max_override: None }
    }

    pub fn p_max(&self) -> f64 {
        self.p_max_override.unwrap_or(self.capacity_mwh)
    }

    pub fn validate(&self, net: &Network) -> Result<(), GridError> {
        let bad = |reason: String| GridError::BadStation { station: self.station_id, reason };
        if !(self.capacity_mwh >= 0.0) {
            return Err(bad(format!("capacity {} MWh is negative", self.capacity_mwh)));
        }
        if !(0.0..=1.0).contains(&self.soc_init) {
            return Err(bad(format!("initial SoC {} outside [0, 1]", self.soc_init)));
        }
        if !(self.p_max() >= 0.0) {
            return Err(bad(format!("power limit {} MW is negative", self.p_max())));
        }
        match net.bus_index(self.bus_id) {
            None => Err(bad(format!("bus {} is not in the network", self.bus_id))),
            Some(i) if i == net.slack() => Err(bad(format!("bus {} is the slack bus", self.bus_id))),
            Some(_) => Ok(()),
        }
    }
}
