use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypersde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn manifest(out: &Path, command: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(out.join(format!("manifest_{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn kernel_solve_on_delayed_config_is_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve-kernels", config("cascade_feedback.json").to_str().unwrap()], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("not applicable"));
}

#[test]
fn kernel_solve_writes_and_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("k.csv");
    let cfg = config("scalar_kernel.json");
    let args = ["solve-kernels", cfg.to_str().unwrap(), "--nx", "48", "--kernel-cache", cache.to_str().unwrap()];
    let first = run(&args, dir.path());
    assert!(first.status.success(), "{}", stdout(&first));
    assert!(cache.exists());
    assert_eq!(manifest(dir.path(), "solve-kernels")["kernels"][0]["reused"], false);
    let second = run(&args, dir.path());
    assert!(second.status.success());
    let m = manifest(dir.path(), "solve-kernels");
    assert_eq!(m["kernels"][0]["reused"], true);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn feedback_simulation_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["simulate", config("cascade_feedback.json").to_str().unwrap(), "--paths", "40", "--seed", "7"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(text.starts_with("t,mean_0,std_0,stderr_0"));
    let m = manifest(dir.path(), "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["details"]["paths"], 40);
}

#[test]
fn simulation_is_reproducible_for_a_seed() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("cascade_feedback.json");
    let args = ["simulate", cfg.to_str().unwrap(), "--paths", "30", "--seed", "11"];
    assert!(run(&args, d1.path()).status.success());
    assert!(run(&args, d2.path()).status.success());
    let a = std::fs::read(d1.path().join("summary.csv")).unwrap();
    let b = std::fs::read(d2.path().join("summary.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn high_gain_sweep_reports_costs_above_floor() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["simulate", config("cascade_highgain.json").to_str().unwrap(), "--paths", "40", "--gains", "5,20"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let mut rd = csv::Reader::from_path(dir.path().join("highgain_costs.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let cost: f64 = r[1].parse().unwrap();
        let floor: f64 = r[2].parse().unwrap();
        assert!(cost > floor, "{r:?}");
    }
    assert!(dir.path().join("summary_K20.csv").exists());
}

#[test]
fn bound_writes_floor_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bound", config("cascade_highgain.json").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    for f in ["gamma.csv", "sigma_min.csv", "v_min.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let j = manifest(dir.path(), "bound")["details"]["j_min"].clone();
    assert!(j.is_number() || j.is_array(), "{j}");
}

#[test]
fn check_flags_non_monotone_speeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check", config("bad_speeds.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let m = manifest(dir.path(), "check");
    let failed: Vec<&str> = m["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["leftward speeds increasing"]);
}

#[test]
fn missing_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bound", "no/such/file.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/file.json"));
}
