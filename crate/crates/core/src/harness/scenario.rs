use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::tou::TouSchedule;
use super::HarnessError;
use crate::grid::{parse_case, parse_profiles, synth_profiles, LoadForecast, Network, StationConfig};
use crate::icd::IcdConfig;
use crate::market::PricingContext;
use crate::sdid::SdidConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: String,
    network: PathBuf,
    #[serde(default = "default_horizon")]
    horizon: usize,
    #[serde(default = "default_dt")]
    dt_hours: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    smoothing: f64,
    profiles: ProfileSource,
    stations: Vec<StationConfig>,
    #[serde(default)]
    pricing: PricingSection,
}

fn default_horizon() -> usize {
    96
}

fn default_dt() -> f64 {
    0.25
}

/// Where station demand comes from.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProfileSource {
    File { path: PathBuf },
    Synth { seed: u64, peak_mw: Vec<f64> },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PricingSection {
    tou: Option<TouSection>,
    icd: Option<IcdSection>,
    sdid: Option<SdidSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TouSection {
    schedule: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IcdSection {
    alpha: f64,
    beta: f64,
    max_outer_iters: Option<usize>,
    price_tol: Option<f64>,
    price_scale: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdidSection {
    alpha: f64,
    beta: f64,
    eta_init: Option<f64>,
    gamma_decay: Option<f64>,
    decay: Option<bool>,
    n_iters: Option<usize>,
}

/// A loaded experiment: network, stations with their demand, and the
/// configuration of each pricing method. Relative paths in the file are
/// resolved against the file's directory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network_path: PathBuf,
    pub net: Network,
    pub profiles: ProfileSource,
    pub stations: Vec<StationConfig>,
    pub forecasts: Vec<LoadForecast>,
    pub horizon: usize,
    pub dt_hours: f64,
    pub seed: u64,
    /// Curvature of the station operators' costs; see
    /// [`PricingContext::with_smoothing`].
    pub smoothing: f64,
    pub tou: TouSchedule,
    pub icd: Option<IcdConfig>,
    pub sdid: Option<SdidConfig>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let raw: ScenarioFile = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let network_path = resolve(&raw.network);
        let net = parse_case(&network_path)?;
        if raw.horizon == 0 || !(raw.dt_hours > 0.0) {
            return Err(HarnessError::Invalid("horizon and dt_hours must be positive".into()));
        }
        let day = raw.horizon as f64 * raw.dt_hours;
        if (day - 24.0).abs() > 1e-9 {
            return Err(HarnessError::Invalid(format!(
                "horizon {} x dt {} h covers {day} h, not 24 h",
                raw.horizon, raw.dt_hours
            )));
        }
        if raw.stations.is_empty() {
            return Err(HarnessError::Invalid("no stations".into()));
        }
        for (i, s) in raw.stations.iter().enumerate() {
            s.validate(&net)?;
            if raw.stations[..i].iter().any(|o| o.station_id == s.station_id) {
                return Err(HarnessError::Invalid(format!("duplicate station id {}", s.station_id)));
            }
        }
        let profiles = match raw.profiles {
            ProfileSource::File { path } => ProfileSource::File { path: resolve(&path) },
            synth => synth,
        };
        let forecasts = match &profiles {
            ProfileSource::File { path } => parse_profiles(path, raw.horizon, &raw.stations)?,
            ProfileSource::Synth { seed, peak_mw } => {
                if peak_mw.len() != raw.stations.len() {
                    return Err(HarnessError::Invalid(format!(
                        "{} peak_mw values for {} stations",
                        peak_mw.len(),
                        raw.stations.len()
                    )));
                }
                if peak_mw.iter().any(|p| !(*p >= 0.0)) {
                    return Err(HarnessError::Invalid("peak_mw must be non-negative".into()));
                }
                synth_profiles(*seed, &raw.stations, peak_mw, raw.horizon)
            }
        };
        let tou = match &raw.pricing.tou {
            Some(t) => {
                let p = resolve(&t.schedule);
                let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                TouSchedule::from_toml_str(&text)?
            }
            None => TouSchedule::default_bev(),
        };
        let icd = raw.pricing.icd.map(|s| {
            let mut c = IcdConfig::new(s.alpha, s.beta);
            c.seed = raw.seed;
            c.max_outer_iters = s.max_outer_iters.unwrap_or(c.max_outer_iters);
            c.price_tol = s.price_tol.unwrap_or(c.price_tol);
            c.price_scale = s.price_scale.or(c.price_scale);
            c
        });
        let sdid = raw.pricing.sdid.map(|s| {
            let mut c = SdidConfig::new(s.alpha, s.beta);
            c.seed = raw.seed;
            c.eta_init = s.eta_init.unwrap_or(c.eta_init);
            c.gamma_decay = s.gamma_decay.unwrap_or(c.gamma_decay);
            c.decay = s.decay.unwrap_or(c.decay);
            c.n_iters = s.n_iters.unwrap_or(c.n_iters);
            c
        });
        if let Some(c) = &icd {
            c.validate()?;
        }
        if let Some(c) = &sdid {
            c.validate()?;
        }
        if !(raw.smoothing >= 0.0) {
            return Err(HarnessError::Invalid("smoothing must be non-negative".into()));
        }
        Ok(Self {
            name: raw.name,
            network_path,
            net,
            profiles,
            stations: raw.stations,
            forecasts,
            horizon: raw.horizon,
            dt_hours: raw.dt_hours,
            seed: raw.seed,
            smoothing: raw.smoothing,
            tou,
            icd,
            sdid,
        })
    }

    /// Replaces the seed used for starting prices.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(c) = &mut self.icd {
            c.seed = seed;
        }
        if let Some(c) = &mut self.sdid {
            c.seed = seed;
        }
        self
    }

    pub fn context(&self) -> Result<PricingContext, HarnessError> {
        Ok(PricingContext::new(self.net.clone(), self.stations.clone(), &self.forecasts, self.dt_hours)?
            .with_smoothing(self.smoothing))
    }

    pub fn icd_config(&self) -> Result<&IcdConfig, HarnessError> {
        self.icd.as_ref().ok_or_else(|| HarnessError::Invalid("scenario has no [pricing.icd] section".into()))
    }

    pub fn sdid_config(&self) -> Result<&SdidConfig, HarnessError> {
        self.sdid.as_ref().ok_or_else(|| HarnessError::Invalid("scenario has no [pricing.sdid] section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }

    const BASE: &str = r#"
network = "ieee14.json"
seed = 3
[profiles]
source = "synth"
seed = 1
peak_mw = [0.5, 1.0]
[[stations]]
station_id = 1
bus_id = 11
capacity_mwh = 0.5
soc_init = 0.9
[[stations]]
station_id = 2
bus_id = 12
capacity_mwh = 1.0
soc_init = 0.6
[pricing.icd]
alpha = 1e6
beta = 10.0
"#;

    #[test]
    fn loads_and_applies_defaults() {
        let s = Scenario::from_toml_str(BASE, &data_dir()).unwrap();
        assert_eq!((s.horizon, s.dt_hours), (96, 0.25));
        assert_eq!(s.forecasts.len(), 2);
        assert_eq!(s.icd.as_ref().unwrap().seed, 3);
        assert!(s.sdid.is_none());
        assert_eq!(s.tou, TouSchedule::default_bev());
        let s = s.with_seed(9);
        assert_eq!(s.icd_config().unwrap().seed, 9);
        assert!(s.sdid_config().is_err());
        assert_eq!(s.context().unwrap().k(), 2);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let dir = data_dir();
        let bad_bus = BASE.replace("bus_id = 12", "bus_id = 99");
        assert!(matches!(Scenario::from_toml_str(&bad_bus, &dir), Err(HarnessError::Grid(_))));
        let short_day = BASE.replace("seed = 3", "seed = 3\nhorizon = 48");
        assert!(matches!(Scenario::from_toml_str(&short_day, &dir), Err(HarnessError::Invalid(_))));
        let peaks = BASE.replace("[0.5, 1.0]", "[0.5]");
        assert!(matches!(Scenario::from_toml_str(&peaks, &dir), Err(HarnessError::Invalid(_))));
        let dup = BASE.replace("station_id = 2", "station_id = 1");
        assert!(matches!(Scenario::from_toml_str(&dup, &dir), Err(HarnessError::Invalid(_))));
        let typo = BASE.replace("smoothing", "smoothin").replace("seed = 3", "seed = 3\nsmoothin = 1");
        assert!(matches!(Scenario::from_toml_str(&typo, &dir), Err(HarnessError::Parse(_))));
    }
}
