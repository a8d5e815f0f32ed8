//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use evprice::dispatch::{dispatch_oracle_dp, dispatch_sensitivity, solve_dispatch, DispatchProblem};
use evprice::grid::{parse_case, LoadForecast, Network, StationConfig};
use evprice::harness::{run_compare, CompareReport, Method, Scenario};
use evprice::market::PricingContext;
use evprice::power_flow::{
    ac_residual, calc_injections, jacobian_blocks, max_mismatch, solve_power_flow, NewtonOptions, OperatingPoint,
};
use evprice::sdid::{fd_grad_f, grad_f};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn case(name: &str) -> Network {
    parse_case(root().join("data").join(name)).unwrap()
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(root().join("scenarios").join(format!("{name}.toml"))).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn power_flow_certificate() -> Outcome {
    let net = case("ieee14.json");
    let (p, q) = net.base_injections();
    let start = Instant::now();
    let sol = solve_power_flow(&net, &p, &q, NewtonOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (mp, mq) = ac_residual(&net, &sol.op, &p, &q);
    let mismatch = max_mismatch(&net, &mp, &mq);
    check(
        sol.iterations <= 10 && mismatch < 1e-8 && elapsed < Duration::from_secs(1),
        format!("{} iterations, residual {mismatch:.2e} p.u., {:.2} ms", sol.iterations, elapsed.as_secs_f64() * 1e3),
    )
}

fn jacobian_correctness() -> Outcome {
    let net = case("ieee14.json");
    let n = net.n();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut op = OperatingPoint {
            v: (0..n).map(|_| rng.random_range(0.9..1.1)).collect(),
            theta: (0..n).map(|_| rng.random_range(-0.3..0.3)).collect(),
        };
        op.theta[net.slack()] = 0.0;
        let blocks = jacobian_blocks(net.admittance(), &op);
        let mut fd = [(); 4].map(|_| blocks.dp_dv.clone() * 0.0);
        for k in 0..n {
            let shifted = |dv: f64, dth: f64| {
                let mut o = op.clone();
                o.v[k] += dv;
                o.theta[k] += dth;
                calc_injections(net.admittance(), &o)
            };
            let ((pv, qv), (mv, nv)) = (shifted(h, 0.0), shifted(-h, 0.0));
            let ((pt, qt), (mt, nt)) = (shifted(0.0, h), shifted(0.0, -h));
            for i in 0..n {
                fd[0][(i, k)] = (pv[i] - mv[i]) / (2.0 * h);
                fd[1][(i, k)] = (pt[i] - mt[i]) / (2.0 * h);
                fd[2][(i, k)] = (qv[i] - nv[i]) / (2.0 * h);
                fd[3][(i, k)] = (qt[i] - nt[i]) / (2.0 * h);
            }
        }
        let analytic = [&blocks.dp_dv, &blocks.dp_dtheta, &blocks.dq_dv, &blocks.dq_dtheta];
        for (a, f) in analytic.into_iter().zip(&fd) {
            worst = worst.max((a - f).amax() / a.amax());
        }
    }
    check(worst < 1e-6, format!("20 operating points, worst block relative error {worst:.2e}"))
}

fn dispatch_optimality() -> Outcome {
    let (soc_levels, power_levels) = (17, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap = f64::NEG_INFINITY;
    for case in 0..200 {
        let prices: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..0.5)).collect();
        let load: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
        let cap = rng.random_range(0.1..5.0);
        let soc = rng.random_range(0.0..=1.0);
        let prob = DispatchProblem::new(prices, load, cap, soc, cap, 0.25);
        let sol = solve_dispatch(&prob).map_err(|e| format!("problem {case}: {e}"))?;
        sol.check_feasible(&prob).map_err(|e| format!("problem {case}: {e}"))?;
        let oracle = dispatch_oracle_dp(&prob, soc_levels, power_levels).map_err(|e| e.to_string())?;
        // Lattice snapping error: one charge cell of energy times total
        // price variation plus the final price.
        let cell = 1.0 / (soc_levels - 1) as f64;
        let variation: f64 = prob.prices.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        let top = prob.prices.iter().copied().fold(0.0, f64::max);
        let bound = 1000.0 * cap * cell * (variation + top)
            + prob.regularization * 8.0 * prob.p_max_mw * prob.p_max_mw;
        let allowed = oracle + 0.01 * oracle.abs() + bound;
        if sol.cost > allowed {
            return Err(format!("problem {case}: cost {} above {allowed}", sol.cost));
        }
        worst_gap = worst_gap.max(sol.cost - oracle);
    }
    Ok(format!("200 problems feasible, max cost - oracle {worst_gap:.3e} $"))
}

fn icd_equity(reports: &[(String, CompareReport)]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, r) in reports {
        let (Some(res), Some(sol)) = (r.get(Method::Icd), &r.icd) else {
            return Err(format!("{name}: icd failed"));
        };
        ok &= res.gamma.abs() <= 1e-4 && sol.outer_iters <= 4;
        lines.push(format!("{name}: gamma {:.2e} after {} outer iterations", res.gamma, sol.outer_iters));
    }
    check(ok, lines.join("; "))
}

fn deviation_improvement(reports: &[(String, CompareReport)], times: &[Duration]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for ((name, r), time) in reports.iter().zip(times) {
        let tou = r.get(Method::Tou).ok_or(format!("{name}: tou failed"))?.frobenius_deviation;
        let mut parts = vec![format!("{name}: tou {tou:.3e}")];
        for m in [Method::Icd, Method::Sdid] {
            let d = r.get(m).ok_or(format!("{name}: {} failed", m.name()))?.frobenius_deviation;
            ok &= d < tou && d <= 0.8 * tou;
            parts.push(format!("{} {d:.3e} ({:.0}% lower)", m.name(), 100.0 * (1.0 - d / tou)));
        }
        ok &= *time < Duration::from_secs(300);
        parts.push(format!("{:.1} s", time.as_secs_f64()));
        lines.push(parts.join(", "));
    }
    check(ok, lines.join("; "))
}

fn sdid_gradient() -> Outcome {
    let net = case("ring4.json");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for i in 0..20 {
        let horizon = 4;
        let stations = vec![StationConfig::new(1, 3, 1.0, 0.5), StationConfig::new(2, 4, 2.0, 0.4)];
        let phase = rng.random_range(0.0..6.0);
        let forecasts: Vec<LoadForecast> = (0..2)
            .map(|k| LoadForecast {
                station_id: k as u32 + 1,
                values: (0..horizon).map(|t| 0.6 + 0.4 * ((t as f64 + phase) * 1.1 + k as f64).sin()).collect(),
            })
            .collect();
        let ctx = PricingContext::new(net.clone(), stations, &forecasts, 0.25)
            .map_err(|e| e.to_string())?
            .with_smoothing(rng.random_range(100.0..300.0));
        let (alpha, beta) = (rng.random_range(1e4..1e6), rng.random_range(0.0..1.0));
        let prices = ctx.random_prices(100 + i);
        let dispatches = ctx.solve_dispatches(&prices).map_err(|e| e.to_string())?;
        let p_net = PricingContext::net_power(&dispatches);
        let bundles = ctx.bundles(&p_net).map_err(|e| e.to_string())?;
        let sens = (0..2)
            .map(|j| dispatch_sensitivity(&ctx.dispatch_problem(j, &prices.row(j)), &dispatches[j]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        if sens.iter().any(|s| s.is_degenerate()) {
            skipped += 1;
            continue;
        }
        let g = grad_f(&ctx, &prices, &p_net, &sens, &bundles, alpha, beta);
        let fd = fd_grad_f(&ctx, &prices, &bundles, alpha, beta, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max((&g - &fd).amax() / fd.amax());
        checked += 1;
    }
    check(
        checked > 0 && worst < 1e-3,
        format!("{checked} instances checked, {skipped} degenerate skipped, worst relative error {worst:.2e}"),
    )
}

fn sdid_trend(reports: &[(String, CompareReport)]) -> Outcome {
    let (name, r) = &reports[0];
    let sol = r.sdid.as_ref().ok_or(format!("{name}: sdid failed"))?;
    let first = sol.trace.initial();
    let best = &sol.trace.records[sol.best_iter];
    check(
        sol.trace.records.len() == 50 && best.objective < first.objective && best.gamma.abs() < first.gamma.abs(),
        format!(
            "{name}: {} iterations, best {} F {:.4e} < {:.4e}, |gamma| {:.3e} < {:.3e}",
            sol.trace.records.len(),
            sol.best_iter,
            best.objective,
            first.objective,
            best.gamma.abs(),
            first.gamma.abs()
        ),
    )
}

fn cost_ordering(reports: &[(String, CompareReport)]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, r) in reports {
        let icd = r.get(Method::Icd).ok_or(format!("{name}: icd failed"))?.ms_per_iter();
        let sdid = r.get(Method::Sdid).ok_or(format!("{name}: sdid failed"))?.ms_per_iter();
        ok &= icd < sdid;
        lines.push(format!("{name}: icd inner solve {icd:.2} ms, sdid iteration {sdid:.2} ms"));
    }
    check(ok, lines.join("; "))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_evprice"))
            .arg("compare")
            .arg("--scenario")
            .arg(root().join("scenarios/config1.toml"))
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if status.status.success() {
            Ok(csv_files(out))
        } else {
            Err(String::from_utf8_lossy(&status.stderr).into_owned())
        }
    };
    let a = run(&tmp.path().join("a"))?;
    let b = run(&tmp.path().join("b"))?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    check(a.len() >= 7 && a == b, format!("{} CSV files identical: {}", a.len(), names.join(" ")))
}

fn main() -> ExitCode {
    let mut reports = Vec::new();
    let mut times = Vec::new();
    for name in ["config1", "config2"] {
        let s = scenario(name);
        let start = Instant::now();
        let r = run_compare(&s).expect("compare runs");
        times.push(start.elapsed());
        reports.push((name.to_string(), r));
    }
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("power-flow certificate", Box::new(power_flow_certificate)),
        ("jacobian correctness", Box::new(jacobian_correctness)),
        ("dispatch optimality", Box::new(dispatch_optimality)),
        ("icd equity", Box::new(|| icd_equity(&reports))),
        ("deviation improvement", Box::new(|| deviation_improvement(&reports, &times))),
        ("sdid gradient", Box::new(sdid_gradient)),
        ("sdid trend", Box::new(|| sdid_trend(&reports))),
        ("per-iteration cost ordering", Box::new(|| cost_ordering(&reports))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("AC{} {tag} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
