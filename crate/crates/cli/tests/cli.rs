use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epimfg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("EPIMFG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn r0_prints_the_reproduction_number() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["r0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l == "all 2.5"), "{stdout}");
    let s = summary(dir.path());
    assert_eq!(s["results"]["r0"][0]["r0"].as_f64().unwrap(), 2.5);
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn stationary_reports_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["stationary"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let s = summary(dir.path());
    let c = &s["results"]["attributes"][0]["constants"];
    assert!((c["a_thresh"].as_f64().unwrap() - 0.305147).abs() < 1e-6);
    assert!(dir.path().join("checks.csv").exists());
    assert!(dir.path().join("stationary_all.csv").exists());
}

#[test]
fn fully_observed_equilibrium_has_no_infectious_activity() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fo-mfe"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = summary(dir.path());
    assert_eq!(s["results"]["beta_max"].as_f64().unwrap(), 0.0);
    let pop = std::fs::read_to_string(dir.path().join("population.csv")).unwrap();
    assert!(pop.starts_with("t,theta,rho_s,rho_a,rho_i,rho_r,rho_d,beta,alpha\n"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"grids": {"n_a": 11, "na": 3}}"#);
    let o = run(&["r0", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_flag_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["r0", "--grid-na", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_gate_exits_one_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"grids": {"n_a": 21, "dt": 0.1, "horizon": 4.0}}"#);
    let o = run(&["po-mfe", "--config", &cfg, "--max-iters", "2"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let s = summary(&dir.path().join("out"));
    assert_eq!(s["pass"], Value::Bool(false));
    assert_eq!(s["results"]["iterations"].as_u64().unwrap(), 2);
    assert!(dir.path().join("out/convergence.csv").exists());
}

#[test]
fn monte_carlo_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"grids": {"n_a": 41, "dt": 0.05, "horizon": 2.0},
            "mc": {"n_agents": 2000, "sample_times": [1.0], "dump_samples": true}}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = run(&["mc-validate", "--config", &cfg, "--seed", "7"], &a);
    let ob = run(&["mc-validate", "--config", &cfg, "--seed", "7"], &b);
    assert!(matches!(oa.status.code(), Some(0 | 1)));
    assert_eq!(oa.status.code(), ob.status.code());
    for f in ["oracle.csv", "mc_series.csv", "belief_samples.csv", "summary.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let oc = run(&["mc-validate", "--config", &cfg, "--seed", "8"], &dir.path().join("c"));
    assert!(oc.status.code().is_some());
    assert_ne!(
        std::fs::read(a.join("mc_series.csv")).unwrap(),
        std::fs::read(dir.path().join("c/mc_series.csv")).unwrap()
    );
}

#[test]
fn po_solve_writes_density_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"grids": {"n_a": 21, "dt": 0.1, "horizon": 2.0}}"#);
    let o = run(&["po-solve", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for f in ["value_policy.csv", "density.csv", "fpk_series.csv", "mean_field.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let vp = std::fs::read_to_string(dir.path().join("value_policy.csv")).unwrap();
    // header plus 21 belief nodes at each of 21 time nodes
    assert_eq!(vp.lines().count(), 1 + 21 * 21);
}
