use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_powerdelay")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// Rows of a CSV printed with a leading `#` provenance line.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn mincost_lists_the_vertex_at_lambda_08() {
    let m = model("example.json");
    let out = run(&["mincost", "--model", m.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = rows(&stdout(&out));
    let vertex = table
        .iter()
        .skip(1)
        .find(|r| r[0].parse::<f64>().is_ok_and(|x| (x - 0.8).abs() < 1e-12))
        .expect("vertex at 0.8");
    let c: f64 = vertex[1].parse().unwrap();
    assert!((c - 1.1071).abs() < 5e-4, "{c}");
}

#[test]
fn classify_reports_case_three_at_a_breakpoint() {
    let m = model("example.json");
    let out = run(&["classify", "--model", m.to_str().unwrap(), "--lambda", "0.8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = rows(&stdout(&out));
    let case = table[0].iter().position(|h| h == "case").unwrap();
    assert_eq!(table[1][case], "3");
}

#[test]
fn sweep_then_fit_finds_inverse_growth() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("example.json");
    let out_dir = dir.path().to_str().unwrap();
    let sweep = run(&["sweep", "--model", m.to_str().unwrap(), "--beta-grid", "1e-1:1e4:10/decade", "--out", out_dir]);
    assert!(sweep.status.success(), "{}", stderr(&sweep));
    let csv = dir.path().join("sweep.csv");
    assert!(csv.is_file());
    let fit = run(&["fit", "--input", csv.to_str().unwrap()]);
    assert!(fit.status.success(), "{}", stderr(&fit));
    let table = rows(&stdout(&fit));
    assert_eq!(table[1][0], "inv", "{}", stdout(&fit));
}

#[test]
fn missing_model_is_a_validation_error() {
    let out = run(&["mincost", "--model", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("model file not found"), "{err}");
    assert!(err.contains("model_file_not_found"), "{err}");
}

#[test]
fn negative_rho_names_the_parameter() {
    let m = model("example_admission.json");
    let out = run(&["sweep-u", "--model", m.to_str().unwrap(), "--rho", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("rho"), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_the_model_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("model = {:?}\nlambda = 0.78\n", model("example.json"))).unwrap();
    let out = run(&["classify", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = rows(&stdout(&out));
    let case = table[0].iter().position(|h| h == "case").unwrap();
    assert_eq!(table[1][case], "2");

    let out = run(&["classify", "--config", cfg.to_str().unwrap(), "--lambda", "0.8"]);
    assert_eq!(rows(&stdout(&out))[1][case], "3");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("model = {:?}\nlamda = 0.78\n", model("example.json"))).unwrap();
    let out = run(&["classify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn unstable_rate_is_rejected() {
    let m = model("example.json");
    let out = run(&["solve", "--model", m.to_str().unwrap(), "--lambda", "2.5", "--beta", "1"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn solve_writes_a_policy_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("example.json");
    let out = run(&["solve", "--model", m.to_str().unwrap(), "--beta", "10", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("solution.csv").is_file());
    let policy = fs::read_to_string(dir.path().join("policy.csv")).unwrap();
    assert_eq!(rows(&policy)[0], ["q", "h_index", "s"]);

    let sim = run(&[
        "simulate",
        "--model",
        m.to_str().unwrap(),
        "--policy",
        dir.path().join("policy.csv").to_str().unwrap(),
        "--horizon",
        "20000",
        "--burn-in",
        "2000",
    ]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    assert!(stdout(&sim).contains("q_bar"));
}
