//! Scenario runs: the time-of-use baseline, both pricing loops, and the
//! comparison that scores them with one nonlinear simulation path.

mod scenario;
mod tou;

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

pub use scenario::{ProfileSource, Scenario};
pub use tou::{TouPeriod, TouSchedule};

use crate::equity::{gamma, PriceMatrix};
use crate::grid::{GridError, Network};
use crate::icd::{run_icd, write_icd_log, IcdConfig, IcdSolution};
use crate::market::{elapsed_ms, PricingContext, PricingError};
use crate::power_flow::{simulate_horizon, HorizonSimulation, PowerFlowError};
use crate::sdid::{run_sdid, SdidConfig, SdidResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tou,
    Icd,
    Sdid,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tou, Method::Icd, Method::Sdid];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tou => "tou",
            Method::Icd => "icd",
            Method::Sdid => "sdid",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub method: Method,
    /// Nonlinear voltage deviation, p.u.
    pub frobenius_deviation: f64,
    pub gamma: f64,
    pub prices: PriceMatrix,
    /// Station net power, `K x T`, MW.
    pub p_net: DMatrix<f64>,
    pub simulation: HorizonSimulation,
    pub iters: usize,
    /// Wall time per iteration. For ICD only the combined solve is timed;
    /// for SDID the whole iteration; TOU has one round of dispatches.
    pub iter_ms: Vec<f64>,
}

impl ScenarioResult {
    pub fn ms_per_iter(&self) -> f64 {
        if self.iter_ms.is_empty() {
            0.0
        } else {
            self.iter_ms.iter().sum::<f64>() / self.iter_ms.len() as f64
        }
    }
}

/// The one path every method's schedule is scored through.
pub fn evaluate_schedule(ctx: &PricingContext, p_net: &DMatrix<f64>) -> Result<HorizonSimulation, PowerFlowError> {
    simulate_horizon(ctx.net(), &ctx.injections(p_net), ctx.newton())
}

fn score(
    ctx: &PricingContext,
    method: Method,
    prices: PriceMatrix,
    p_net: DMatrix<f64>,
    iters: usize,
    iter_ms: Vec<f64>,
) -> Result<ScenarioResult, HarnessError> {
    let simulation = evaluate_schedule(ctx, &p_net)?;
    Ok(ScenarioResult {
        method,
        frobenius_deviation: simulation.frobenius_deviation,
        gamma: gamma(&prices),
        prices,
        p_net,
        simulation,
        iters,
        iter_ms,
    })
}

/// Every station faces the same tariff.
pub fn tou_prices(ctx: &PricingContext, schedule: &TouSchedule) -> PriceMatrix {
    let row = schedule.expand(ctx.horizon(), ctx.dt_hours());
    PriceMatrix::new(DMatrix::from_fn(ctx.k(), ctx.horizon(), |_, t| row[t]), ctx.station_ids())
}

pub fn run_baseline_tou(ctx: &PricingContext, schedule: &TouSchedule) -> Result<ScenarioResult, HarnessError> {
    schedule.validate()?;
    let prices = tou_prices(ctx, schedule);
    let start = Instant::now();
    let dispatches = ctx.solve_dispatches(&prices)?;
    let ms = elapsed_ms(start);
    let p_net = PricingContext::net_power(&dispatches);
    score(ctx, Method::Tou, prices, p_net, 1, vec![ms])
}

pub fn run_icd_method(ctx: &PricingContext, cfg: &IcdConfig) -> Result<(ScenarioResult, IcdSolution), HarnessError> {
    let sol = run_icd(ctx, cfg)?;
    let res = score(ctx, Method::Icd, sol.prices.clone(), sol.p_net.clone(), sol.outer_iters, sol.inner_ms.clone())?;
    Ok((res, sol))
}

pub fn run_sdid_method(
    ctx: &PricingContext,
    cfg: &SdidConfig,
) -> Result<(ScenarioResult, SdidResult), HarnessError> {
    let sol = run_sdid(ctx, cfg)?;
    let iter_ms = sol.trace.records.iter().map(|r| r.wall_ms).collect();
    let res = score(ctx, Method::Sdid, sol.prices.clone(), sol.p_net.clone(), sol.trace.records.len(), iter_ms)?;
    Ok((res, sol))
}

#[derive(Debug)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: Result<ScenarioResult, String>,
}

#[derive(Debug)]
pub struct CompareReport {
    pub scenario: String,
    pub seed: u64,
    pub net: Network,
    pub outcomes: Vec<MethodOutcome>,
    pub icd: Option<IcdSolution>,
    pub sdid: Option<SdidResult>,
}

/// Runs TOU, ICD and SDID on one context. A failing method leaves an error
/// in its slot and the others still run.
pub fn run_compare(scenario: &Scenario) -> Result<CompareReport, HarnessError> {
    let ctx = scenario.context()?;
    let mut outcomes = Vec::new();
    let mut icd = None;
    let mut sdid = None;
    for method in Method::ALL {
        let result = match method {
            Method::Tou => run_baseline_tou(&ctx, &scenario.tou),
            Method::Icd => scenario.icd_config().and_then(|c| run_icd_method(&ctx, c)).map(|(r, s)| {
                icd = Some(s);
                r
            }),
            Method::Sdid => scenario.sdid_config().and_then(|c| run_sdid_method(&ctx, c)).map(|(r, s)| {
                sdid = Some(s);
                r
            }),
        };
        if let Err(e) = &result {
            log::warn!("{}: {e}", method.name());
        }
        outcomes.push(MethodOutcome { method, result: result.map_err(|e| e.to_string()) });
    }
    Ok(CompareReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        net: scenario.net.clone(),
        outcomes,
        icd,
        sdid,
    })
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    method: Method,
    deviation_pu: Option<f64>,
    gamma: Option<f64>,
    iters: Option<usize>,
    ms_per_iter: Option<f64>,
    /// Fractional reduction in deviation against TOU.
    improvement: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    seed: u64,
    methods: Vec<SummaryRow<'a>>,
    icd_best_iter: Option<usize>,
    sdid_best_iter: Option<usize>,
}

impl CompareReport {
    pub fn get(&self, method: Method) -> Option<&ScenarioResult> {
        self.outcomes.iter().find(|o| o.method == method).and_then(|o| o.result.as_ref().ok())
    }

    /// `1 - deviation / TOU deviation`.
    pub fn improvement(&self, method: Method) -> Option<f64> {
        let base = self.get(Method::Tou)?.frobenius_deviation;
        let d = self.get(method)?.frobenius_deviation;
        (base > 0.0).then(|| 1.0 - d / base)
    }

    fn summary_rows(&self) -> Vec<SummaryRow<'_>> {
        self.outcomes
            .iter()
            .map(|o| match &o.result {
                Ok(r) => SummaryRow {
                    method: o.method,
                    deviation_pu: Some(r.frobenius_deviation),
                    gamma: Some(r.gamma),
                    iters: Some(r.iters),
                    ms_per_iter: Some(r.ms_per_iter()),
                    improvement: self.improvement(o.method),
                    error: None,
                },
                Err(e) => SummaryRow {
                    method: o.method,
                    deviation_pu: None,
                    gamma: None,
                    iters: None,
                    ms_per_iter: None,
                    improvement: None,
                    error: Some(e),
                },
            })
            .collect()
    }

    /// Aligned text version of the table, with timings.
    pub fn table_text(&self) -> String {
        let mut s = format!(
            "{:<6} {:>14} {:>12} {:>6} {:>12} {:>9}\n",
            "method", "deviation_pu", "gamma", "iters", "ms_per_iter", "vs_tou"
        );
        for row in self.summary_rows() {
            let name = row.method.name();
            if let Some(e) = row.error {
                let _ = writeln!(s, "{name:<6} error: {e}");
                continue;
            }
            let imp = row.improvement.map_or("-".to_string(), |v| format!("{:+.1}%", -100.0 * v));
            let _ = writeln!(
                s,
                "{name:<6} {:>14.6e} {:>12.3e} {:>6} {:>12.2} {imp:>9}",
                row.deviation_pu.unwrap_or(f64::NAN),
                row.gamma.unwrap_or(f64::NAN),
                row.iters.unwrap_or(0),
                row.ms_per_iter.unwrap_or(f64::NAN),
            );
        }
        s
    }

    /// `method,deviation_pu,gamma,iters,error`. Timings are left out so
    /// that reruns produce identical files; they go to `summary.json`.
    pub fn write_table_csv<W: std::io::Write>(&self, writer: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["method", "deviation_pu", "gamma", "iters", "error"])?;
        for o in &self.outcomes {
            let rec = match &o.result {
                Ok(r) => [
                    o.method.name().to_string(),
                    r.frobenius_deviation.to_string(),
                    r.gamma.to_string(),
                    r.iters.to_string(),
                    String::new(),
                ],
                Err(e) => [o.method.name().to_string(), String::new(), String::new(), String::new(), e.clone()],
            };
            out.write_record(&rec)?;
        }
        out.flush()
    }

    /// Writes `table.csv`, `table.txt`, `summary.json`, the per-method
    /// price and voltage files, `trace_sdid.csv` and `icd_log.jsonl`.
    pub fn write_outputs(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let mut written = Vec::new();
        written.push(write_file(dir, "table.csv", |w| self.write_table_csv(w))?);
        written.push(write_file(dir, "table.txt", |w| w.write_all(self.table_text().as_bytes()))?);
        let summary = Summary {
            scenario: &self.scenario,
            seed: self.seed,
            methods: self.summary_rows(),
            icd_best_iter: self.icd.as_ref().map(|s| s.best_iter),
            sdid_best_iter: self.sdid.as_ref().map(|s| s.best_iter),
        };
        written.push(write_file(dir, "summary.json", |mut w| {
            serde_json::to_writer_pretty(&mut w, &summary)?;
            w.write_all(b"\n")
        })?);
        for o in &self.outcomes {
            if let Ok(r) = &o.result {
                written.extend(write_method_outputs(dir, &self.net, r)?);
            }
        }
        if let Some(s) = &self.sdid {
            written.push(write_file(dir, "trace_sdid.csv", |w| s.trace.write_csv(w))?);
        }
        if let Some(s) = &self.icd {
            written.push(write_file(dir, "icd_log.jsonl", |w| write_icd_log(w, &s.log))?);
        }
        Ok(written)
    }
}

use std::io::Write as _;

/// Creates `dir/name` (and `dir`) and hands a buffered writer to `body`.
pub fn write_file(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// `prices_<method>.csv` and `voltages_<method>.csv`.
pub fn write_method_outputs(dir: &Path, net: &Network, r: &ScenarioResult) -> Result<Vec<PathBuf>, HarnessError> {
    let m = r.method.name();
    Ok(vec![
        write_file(dir, &format!("prices_{m}.csv"), |w| r.prices.write_csv(w))?,
        write_file(dir, &format!("voltages_{m}.csv"), |w| r.simulation.trace.write_csv(w, net))?,
    ])
}
