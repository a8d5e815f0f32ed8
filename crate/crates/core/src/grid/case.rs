//! JSON case files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bus, BusKind, GridError, Line, Network};

/// On-disk layout of a case file. Powers are MW / MVAr, line parameters
/// per-unit on `base_mva`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<CaseBus>,
    pub lines: Vec<CaseLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseBus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
    #[serde(default)]
    pub p_gen: f64,
    #[serde(default)]
    pub q_gen: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_nom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_nom: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseLine {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_shunt: Option<f64>,
}

pub fn parse_case(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| GridError::MalformedFile(format!("{}: {e}", path.display())))?;
    parse_case_str(&text)
}

pub fn parse_case_str(text: &str) -> Result<Network, GridError> {
    let file: CaseFile =
        serde_json::from_str(text).map_err(|e| GridError::MalformedFile(e.to_string()))?;
    Network::try_from(file)
}

impl TryFrom<CaseFile> for Network {
    type Error = GridError;

    fn try_from(file: CaseFile) -> Result<Self, GridError> {
        // Missing nominal voltages mean a flat start.
        let buses = file
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                base_load_p: b.p_load,
                base_load_q: b.q_load,
                base_gen_p: b.p_gen,
                base_gen_q: b.q_gen,
                v_nominal: b.v_nom.unwrap_or(1.0),
                theta_nominal: b.theta_nom.unwrap_or(0.0),
            })
            .collect();
        let lines = file
            .lines
            .into_iter()
            .map(|l| Line {
                from_bus: l.from,
                to_bus: l.to,
                conductance_g: l.g,
                susceptance_b: l.b,
                shunt_b: l.b_shunt.unwrap_or(0.0),
            })
            .collect();
        Network::new(file.name, file.base_mva, buses, lines)
    }
}

impl From<&Network> for CaseFile {
    fn from(net: &Network) -> Self {
        CaseFile {
            name: net.name().to_string(),
            base_mva: net.base_mva(),
            buses: net
                .buses()
                .iter()
                .map(|b| CaseBus {
                    id: b.id,
                    kind: b.kind,
                    p_load: b.base_load_p,
                    q_load: b.base_load_q,
                    p_gen: b.base_gen_p,
                    q_gen: b.base_gen_q,
                    v_nom: Some(b.v_nominal),
                    theta_nom: Some(b.theta_nominal),
                })
                .collect(),
            lines: net
                .lines()
                .iter()
                .map(|l| CaseLine {
                    from: l.from_bus,
                    to: l.to_bus,
                    g: l.conductance_g,
                    b: l.susceptance_b,
                    b_shunt: (l.shunt_b != 0.0).then_some(l.shunt_b),
                })
                .collect(),
        }
    }
}

impl Network {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CaseFile::from(self)).expect("case serialisation")
    }
}
