use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mflqg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflqg"))
        .args(args)
        .env("MFLQG_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = mflqg(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn ising(beta: &str, coupling: &str, q: &str, dt: &str, n: usize, extra: &str) -> String {
    format!(
        r#"{{"model": {{"name": "ising", "params": {{"beta": "{beta}", "field": "0", "coupling": "{coupling}", "obs_rate": "{q}"}}}},
            "dt": "{dt}", "n_steps": {n}, "s0": ["0.5", "0.5"], "n_agents": 2000, "replicas": 20, "base_seed": 7{extra}}}"#
    )
}

const SIR: &str = r#"{"model": {"name": "sir", "params": {"base_rate": "0.87", "recovery": "0.217",
    "test_rate": "0.3333333333333333", "infection_cost": "8000", "control_cost": "100"}},
    "dt": "1", "n_steps": 100, "s0": ["0.99", "0.01", "0"], "optimizer": {"step_rule": "lbfgs"}}"#;

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn last_row(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().last().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn missing_param_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let body = SIR.replace(r#", "control_cost": "100""#, "");
    let cfg = write_config(dir.path(), "c.json", &body);
    let o = mflqg(&["--config", &cfg, "solve-meanfield"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("control_cost"));
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &SIR.replace(r#""dt": "1""#, r#""dt": "fast""#));
    let o = mflqg(&["--config", &cfg, "solve-meanfield"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn free_ising_control_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &ising("1", "0", "2", "0.01", 50, ""));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    let text = fs::read_to_string(dir.path().join("meanfield.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let a = header.iter().position(|h| *h == "A0").unwrap();
    for line in text.lines().skip(1).take(50) {
        let v: f64 = line.split(',').nth(a).unwrap().parse().unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn ising_riccati_fails_past_critical_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &ising("1", "1.2", "2", "0.01", 2000, ""));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    ok(&["--config", &cfg, "solve-lqg"], dir.path());
    let lqg = json(&dir.path().join("lqg.json"));
    assert_eq!(lqg["exists"], Value::Bool(false));
    assert!(lqg["failure_step"].is_u64());
    assert!(lqg["predicted_cost"].is_null());
}

#[test]
fn printed_ising_filter_reaches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "lqg_coefficients": "ising-printed""#;
    let cfg = write_config(dir.path(), "c.json", &ising("1", "0.5", "2", "0.001", 20000, extra));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    ok(&["--config", &cfg, "solve-lqg"], dir.path());
    let pi: f64 = last_row(&dir.path().join("pi.csv"))[2].parse().unwrap();
    assert!((pi - 0.4142136).abs() < 1e-3, "{pi}");
    for f in ["pi.csv", "z.csv", "gains.csv", "lqg.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn sir_pipeline_writes_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &SIR.replace(r#""dt""#, r#""replicas": 10, "dt""#));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    let meta = json(&dir.path().join("meanfield.json"));
    assert!(meta["grad_norm"].as_f64().unwrap() <= 1e-8);
    assert_eq!(meta["converged"], Value::Bool(true));
    ok(&["--config", &cfg, "solve-lqg"], dir.path());
    assert_eq!(json(&dir.path().join("lqg.json"))["exists"], Value::Bool(true));
    ok(&["--config", &cfg, "simulate"], dir.path());
    for f in ["episode.csv", "ensemble.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(dir.path().join("episode.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert_eq!(header, "k,t,count0,count1,count2,obs0,control0,shat0,shat1,shat2");
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &ising("1", "-1", "2", "0.01", 200, ""));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    ok(&["--config", &cfg, "simulate", "--threads", "1"], dir.path());
    let (a, b) = (read("summary.json"), read("ensemble.csv"));
    ok(&["--config", &cfg, "simulate", "--threads", "4"], dir.path());
    assert_eq!(a, read("summary.json"));
    assert_eq!(b, read("ensemble.csv"));
    ok(&["--config", &cfg, "simulate", "--seed", "8"], dir.path());
    assert_ne!(a, read("summary.json"));
}

#[test]
fn scaling_study_reports_slope() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "n_list": [500, 2000, 8000]"#;
    let cfg = write_config(dir.path(), "c.json", &ising("1", "-1", "2", "0.01", 100, extra));
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    let stdout = ok(&["--config", &cfg, "scaling-study", "--controller", "open-loop"], dir.path());
    assert!(stdout.contains("slope"));
    let report = json(&dir.path().join("scaling.json"));
    assert_eq!(report["points"].as_array().unwrap().len(), 3);
    assert!(report["slope"]["slope"].is_f64());
    assert!(dir.path().join("scaling.csv").exists());
}

#[test]
fn unknown_controller_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &ising("1", "-1", "2", "0.01", 10, ""));
    let o = mflqg(&["--config", &cfg, "simulate", "--controller", "pid"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_without_meanfield_explains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &ising("1", "-1", "2", "0.01", 10, ""));
    let o = mflqg(&["--config", &cfg, "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solve-meanfield"));
}

#[test]
fn custom_file_model_runs() {
    let dir = tempfile::tempdir().unwrap();
    let table = r#"{
        "n_states": 2, "n_controls": 1, "n_obs_channels": 1,
        "transitions": [
            {"from": 0, "to": 1, "base": 0.5, "state_coef": [], "control_coef": [1.0]},
            {"from": 1, "to": 0, "base": 1.0, "state_coef": [], "control_coef": []}
        ],
        "observations": [{"from": 1, "channel": 0, "rate": 2.0}],
        "running_cost": {"hessian": [[0, 0, 0], [0, 4, 0], [0, 0, 20]], "linear": []},
        "terminal_cost": {"hessian": [], "linear": []},
        "control_bounds": [[-0.4, 5.0]],
        "baseline_control": [0.0]
    }"#;
    fs::write(dir.path().join("table.json"), table).unwrap();
    let body = r#"{"model": {"name": "custom-file", "file": "table.json"}, "dt": "0.05", "n_steps": 40,
        "s0": ["0.8", "0.2"], "n_agents": 1000, "replicas": 8}"#;
    let cfg = write_config(dir.path(), "c.json", body);
    ok(&["--config", &cfg, "solve-meanfield"], dir.path());
    ok(&["--config", &cfg, "solve-lqg"], dir.path());
    ok(&["--config", &cfg, "simulate"], dir.path());
    assert_eq!(json(&dir.path().join("summary.json"))["controller"], "kalman");
}

#[test]
fn acceptance_writes_machine_readable_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["acceptance", "--only", "2"], dir.path());
    assert!(stdout.contains("criterion  2"));
    let v = json(&dir.path().join("acceptance.json"));
    let first = &v[0];
    assert_eq!(first["id"], 2);
    assert!(first["measured"]["z_bj_0.75"].as_f64().unwrap() < -0.12);
    assert!(first["seconds"].is_f64());
    assert!(first["tolerance"].as_str().unwrap().contains("1e-4"));
}
