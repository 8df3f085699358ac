use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbps_core::inference::EstimateReport;
use tempfile::TempDir;

fn cbps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbps")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generated(dir: &TempDir, scenario: &str, seed: &str) -> PathBuf {
    let path = dir.path().join(format!("{scenario}-{seed}.csv"));
    let out = cbps(&["generate", "--scenario", scenario, "--n", "1000", "--seed", seed, "--with-pi", "--out", path_str(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    path
}

fn field(text: &str, name: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("no `{name}` in\n{text}"));
    line[name.len()..].trim().parse().unwrap()
}

#[test]
fn toy_known_propensity_estimate() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("toy.csv");
    std::fs::write(&path, "t,y,pi,x1\n1,3,0.5,0.2\n0,1,0.5,-0.4\n").unwrap();
    let out = cbps(&["estimate", "--data", path_str(&path), "--method", "true", "--pi-column", "pi"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(field(&stdout(&out), "estimate"), 2.0);
    assert!(stdout(&out).contains("2.0"));
}

#[test]
fn missing_h2_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir, "both-correct", "3");
    let out = cbps(&["estimate", "--data", path_str(&data), "--method", "ocbps", "--h1", "1,x2,x3,x4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--h2"), "{}", stderr(&out));
}

#[test]
fn ocbps_on_a_generated_sample_is_near_the_truth() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir, "both-correct", "7");
    let out = cbps(&["estimate", "--data", path_str(&data), "--method", "ocbps", "--h1", "1,x2,x3,x4", "--h2", "x1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let (estimate, se) = (field(&text, "estimate"), field(&text, "std. error"));
    assert!((estimate - 82.2).abs() <= 4.0 * se, "{estimate} +- {se}");
}

#[test]
fn json_report_round_trips() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir, "ps-misspecified", "2");
    for method in ["glm", "cbps", "aipw"] {
        let out = cbps(&["estimate", "--data", path_str(&data), "--method", method, "--out", "json"]);
        assert!(out.status.success(), "{method}: {}", stderr(&out));
        let report: EstimateReport = serde_json::from_str(&stdout(&out)).unwrap();
        let again = serde_json::to_string_pretty(&report).unwrap();
        assert_eq!(serde_json::from_str::<EstimateReport>(&again).unwrap(), report);
        assert!(report.ci_low < report.point && report.point < report.ci_high);
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = cbps(&["simulate", "--scenario", "ps-local", "--n", "300", "--beta1", "0.33", "--reps", "30", "--seed", "4",
            "--out", path_str(&path)]);
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(path).unwrap()
    };
    let first = run("a.csv");
    assert_eq!(first, run("b.csv"));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("estimator,bias,sd,rmse,coverage,failures\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn single_replication_has_zero_sd() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("one.csv");
    let out = cbps(&["simulate", "--scenario", "both-correct", "--n", "500", "--reps", "1", "--out", path_str(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(path).unwrap();
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("0"), "{line}");
    }
}

#[test]
fn diagnostics_show_balanced_moments() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir, "both-correct", "11");
    for args in [
        &["--method", "ocbps", "--h1", "1,x2,x3,x4", "--h2", "x1"][..],
        &["--method", "glm"][..],
    ] {
        let mut full = vec!["diagnose", "--data", path_str(&data)];
        full.extend_from_slice(args);
        let out = cbps(&full);
        assert!(out.status.success(), "{}", stderr(&out));
        let text = stdout(&out);
        let residuals: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("moment residuals"))
            .skip(1)
            .take_while(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
            .collect();
        assert!(!residuals.is_empty(), "{text}");
        assert!(residuals.iter().all(|r| r.abs() <= 1e-8), "{residuals:?}");
    }
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let out = cbps(&["simulate", "--scenario", "no-such-design", "--reps", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_simulation_is_flagged() {
    let out = cbps(&["simulate", "--scenario", "both-correct", "--n", "12", "--reps", "40", "--estimators", "ocbps"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stdout(&out).contains("INVALID"));
}

#[test]
fn separated_data_is_a_fitting_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("separated.csv");
    // the treated are exactly the units with x1 > 0
    let mut csv = String::from("t,y,x1\n");
    for i in 0..40 {
        let x = i as f64 - 19.5;
        csv.push_str(&format!("{},{},{x}\n", u8::from(x > 0.0), 2.0 * x));
    }
    std::fs::write(&path, csv).unwrap();
    let out = cbps(&["estimate", "--data", path_str(&path), "--method", "glm"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
