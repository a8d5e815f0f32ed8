use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use evprice::grid::{parse_case, synth_profiles, write_profiles};
use evprice::harness::{
    run_baseline_tou, run_compare, run_icd_method, run_sdid_method, write_file, write_method_outputs,
    ProfileSource, Scenario,
};
use evprice::icd::write_icd_log;
use evprice::power_flow::{solve_power_flow, NewtonOptions};

#[derive(Debug, Parser)]
#[command(name = "evprice", version, about = "Nodal EV charging price simulator")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a case file and/or scenario and report what it contains.
    Validate {
        #[arg(long, required_unless_present = "scenario")]
        case: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Solve the base-case power flow.
    Powerflow {
        #[arg(long)]
        case: PathBuf,
    },
    /// Station dispatch under the scenario's time-of-use tariff.
    Dispatch(RunArgs),
    /// Price with the combined dual program.
    PriceIcd {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tune: Tuning,
    },
    /// Price by subgradient descent through the dispatch response.
    PriceSdid {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tune: Tuning,
    },
    /// TOU, ICD and SDID side by side.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tune: Tuning,
    },
    /// Write the scenario's synthetic station demand to profiles.csv.
    SynthProfiles(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Overrides for the pricing sections. `--alpha` and `--beta` apply to
/// both methods.
#[derive(Debug, Args)]
struct Tuning {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Initial SDID step size.
    #[arg(long)]
    eta: Option<f64>,
    /// ICD outer iterations or SDID iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// SDID step decay on or off.
    #[arg(long, action = ArgAction::Set)]
    decay: Option<bool>,
}

fn load(run: &RunArgs, tune: Option<&Tuning>) -> Result<Scenario> {
    let mut s = Scenario::load(&run.scenario).with_context(|| format!("loading {}", run.scenario.display()))?;
    if let Some(seed) = run.seed {
        s = s.with_seed(seed);
    }
    let Some(t) = tune else { return Ok(s) };
    if let Some(c) = &mut s.icd {
        c.alpha = t.alpha.unwrap_or(c.alpha);
        c.beta = t.beta.unwrap_or(c.beta);
        c.max_outer_iters = t.iters.unwrap_or(c.max_outer_iters);
    }
    if let Some(c) = &mut s.sdid {
        c.alpha = t.alpha.unwrap_or(c.alpha);
        c.beta = t.beta.unwrap_or(c.beta);
        c.eta_init = t.eta.unwrap_or(c.eta_init);
        c.n_iters = t.iters.unwrap_or(c.n_iters);
        c.decay = t.decay.unwrap_or(c.decay);
    }
    if let Some(c) = &s.icd {
        c.validate()?;
    }
    if let Some(c) = &s.sdid {
        c.validate()?;
    }
    Ok(s)
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        log::info!("wrote {}", p.display());
    }
}

fn validate(case: Option<&Path>, scenario: Option<&Path>) -> Result<()> {
    if let Some(path) = case {
        let net = parse_case(path).with_context(|| format!("loading {}", path.display()))?;
        println!(
            "{}: {} buses, {} lines, base {} MVA, slack bus {}",
            net.name(),
            net.n(),
            net.lines().len(),
            net.base_mva(),
            net.buses()[net.slack()].id
        );
    }
    if let Some(path) = scenario {
        let s = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
        println!(
            "scenario {:?}: {} stations on buses {:?}, T = {}, dt = {} h, tariff {:?}",
            s.name,
            s.stations.len(),
            s.stations.iter().map(|st| st.bus_id).collect::<Vec<_>>(),
            s.horizon,
            s.dt_hours,
            s.tou.label
        );
        println!("methods: tou{}{}", if s.icd.is_some() { ", icd" } else { "" }, if s.sdid.is_some() { ", sdid" } else { "" });
    }
    Ok(())
}

fn powerflow(case: &Path) -> Result<()> {
    let net = parse_case(case).with_context(|| format!("loading {}", case.display()))?;
    let (p, q) = net.base_injections();
    let start = Instant::now();
    let sol = solve_power_flow(&net, &p, &q, NewtonOptions::default())?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    println!("converged in {} iterations, max mismatch {:.3e} p.u., {ms:.2} ms", sol.iterations, sol.max_mismatch);
    println!("bus,v_pu,theta_rad");
    for (b, (v, th)) in net.buses().iter().zip(sol.op.v.iter().zip(&sol.op.theta)) {
        println!("{},{v:.6},{th:.6}", b.id);
    }
    Ok(())
}

fn dispatch(run: &RunArgs) -> Result<()> {
    let s = load(run, None)?;
    let ctx = s.context()?;
    let r = run_baseline_tou(&ctx, &s.tou)?;
    let dispatches = ctx.solve_dispatches(&r.prices)?;
    let mut written = write_method_outputs(&run.out, &s.net, &r)?;
    written.push(write_file(&run.out, "dispatch.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["station_id", "t", "price", "load_mw", "p_b_mw", "p_net_mw", "soc"])?;
        for (k, d) in dispatches.iter().enumerate() {
            for t in 0..ctx.horizon() {
                out.write_record([
                    ctx.stations()[k].station_id.to_string(),
                    t.to_string(),
                    r.prices.values[(k, t)].to_string(),
                    ctx.loads()[(k, t)].to_string(),
                    d.p_b[t].to_string(),
                    d.p_net[t].to_string(),
                    d.soc[t + 1].to_string(),
                ])?;
            }
        }
        out.flush()
    })?);
    report_written(&written);
    for (st, d) in ctx.stations().iter().zip(&dispatches) {
        println!("station {}: cost ${:.2}, final SoC {:.4}", st.station_id, d.cost, d.soc.last().unwrap_or(&0.0));
    }
    println!("tou deviation {:.6e} p.u.", r.frobenius_deviation);
    Ok(())
}

fn price_icd(run: &RunArgs, tune: &Tuning) -> Result<()> {
    let s = load(run, Some(tune))?;
    let ctx = s.context()?;
    let (r, sol) = run_icd_method(&ctx, s.icd_config()?)?;
    let mut written = write_method_outputs(&run.out, &s.net, &r)?;
    written.push(write_file(&run.out, "icd_log.jsonl", |w| write_icd_log(w, &sol.log))?);
    report_written(&written);
    println!(
        "icd: {} outer iterations (best {}), gamma {:.3e}, deviation {:.6e} p.u., {:.2} ms per solve",
        sol.outer_iters,
        sol.best_iter,
        r.gamma,
        r.frobenius_deviation,
        r.ms_per_iter()
    );
    Ok(())
}

fn price_sdid(run: &RunArgs, tune: &Tuning) -> Result<()> {
    let s = load(run, Some(tune))?;
    let ctx = s.context()?;
    let (r, sol) = run_sdid_method(&ctx, s.sdid_config()?)?;
    let mut written = write_method_outputs(&run.out, &s.net, &r)?;
    written.push(write_file(&run.out, "trace_sdid.csv", |w| sol.trace.write_csv(w))?);
    report_written(&written);
    let first = sol.trace.initial();
    let best = &sol.trace.records[sol.best_iter];
    println!(
        "sdid: best iterate {} of {}: F {:.6e} (start {:.6e}), gamma {:.3e} (start {:.3e}), deviation {:.6e} p.u., {:.2} ms per iteration",
        sol.best_iter,
        sol.trace.records.len(),
        best.objective,
        first.objective,
        best.gamma,
        first.gamma,
        r.frobenius_deviation,
        r.ms_per_iter()
    );
    Ok(())
}

fn compare(run: &RunArgs, tune: &Tuning) -> Result<()> {
    let s = load(run, Some(tune))?;
    let report = run_compare(&s)?;
    let written = report.write_outputs(&run.out)?;
    report_written(&written);
    print!("{}", report.table_text());
    Ok(())
}

fn synth(run: &RunArgs) -> Result<()> {
    let s = load(run, None)?;
    let ProfileSource::Synth { seed, peak_mw } = &s.profiles else {
        bail!("scenario takes its profiles from a file; nothing to synthesise");
    };
    let seed = run.seed.unwrap_or(*seed);
    let forecasts = synth_profiles(seed, &s.stations, peak_mw, s.horizon);
    let path = write_file(&run.out, "profiles.csv", |w| {
        write_profiles(w, &forecasts).map_err(std::io::Error::other)
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate { case, scenario } => validate(case.as_deref(), scenario.as_deref()),
        Command::Powerflow { case } => powerflow(case),
        Command::Dispatch(run) => dispatch(run),
        Command::PriceIcd { run, tune } => price_icd(run, tune),
        Command::PriceSdid { run, tune } => price_sdid(run, tune),
        Command::Compare { run, tune } => compare(run, tune),
        Command::SynthProfiles(run) => synth(run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
