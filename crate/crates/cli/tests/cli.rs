use std::path::PathBuf;
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn evprice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evprice")).args(args).current_dir(root()).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_reports_case_and_scenario() {
    let o = evprice(&["validate", "--case", "data/ieee14.json", "--scenario", "scenarios/config2.toml"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("14 buses"), "{s}");
    assert!(s.contains("methods: tou, icd, sdid"), "{s}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(evprice(&["compare"]).status.code(), Some(2));
    assert_eq!(evprice(&["powerflow", "--case", "data/ieee14.json", "--bogus"]).status.code(), Some(2));
    assert_eq!(evprice(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(evprice(&["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_1() {
    let o = evprice(&["powerflow", "--case", "data/missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(root().join("scenarios/config1.toml")).unwrap();
    std::fs::write(&bad, text.replace("bus_id = 14", "bus_id = 99").replace("../data", root().join("data").to_str().unwrap()))
        .unwrap();
    assert_eq!(evprice(&["validate", "--scenario", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn powerflow_prints_every_bus() {
    let o = evprice(&["powerflow", "--case", "data/ieee14.json"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("converged in"));
    let rows: Vec<&str> = s.lines().skip_while(|l| *l != "bus,v_pu,theta_rad").skip(1).collect();
    assert_eq!(rows.len(), 14);
}

#[test]
fn dispatch_and_price_commands_write_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let sc = "scenarios/config1.toml";
    assert!(evprice(&["dispatch", "--scenario", sc, "--out", out]).status.success());
    assert!(evprice(&["price-icd", "--scenario", sc, "--out", out]).status.success());
    let o = evprice(&["price-sdid", "--scenario", sc, "--out", out, "--iters", "3", "--decay", "false"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("of 3"));
    for f in ["dispatch.csv", "prices_tou.csv", "prices_icd.csv", "icd_log.jsonl", "trace_sdid.csv", "voltages_sdid.csv"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let trace = std::fs::read_to_string(tmp.path().join("trace_sdid.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    let dispatch = std::fs::read_to_string(tmp.path().join("dispatch.csv")).unwrap();
    assert_eq!(dispatch.lines().count(), 1 + 4 * 96);
}

#[test]
fn compare_writes_table_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = evprice(&["compare", "--scenario", "scenarios/config2.toml", "--out", out, "--iters", "5"]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(tmp.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,deviation_pu,gamma,iters,error");
    assert_eq!(lines.len(), 4);
    let summary = std::fs::read_to_string(tmp.path().join("summary.json")).unwrap();
    assert!(summary.contains("\"ms_per_iter\""));
    assert!(stdout(&o).contains("vs_tou"));
}

#[test]
fn synth_profiles_follow_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |seed: &str| {
        let dir = tmp.path().join(seed);
        let o = evprice(&["synth-profiles", "--scenario", "scenarios/config1.toml", "--out", dir.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        std::fs::read_to_string(dir.join("profiles.csv")).unwrap()
    };
    let a = read("5");
    assert_eq!(a.lines().count(), 5);
    assert_ne!(a, read("6"));
}
