use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trafficopt::prediction::ModelDocument;

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trafficopt"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn run(args: &[&str]) -> Output {
    exe().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Noiseless a1: 40 + 0.5·λ(t−1) + 3·z; a2 alternates so it is not constant.
fn write_history(dir: &Path, approaches: &[&str], rows: usize) -> PathBuf {
    let mut text = String::from("t,approach_id,flow,rain\n");
    let mut lam = 100.0;
    for t in 0..rows {
        let z = ((t * 7) % 5) as f64;
        if t > 0 {
            lam = 40.0 + 0.5 * lam + 3.0 * z;
        }
        for (k, a) in approaches.iter().enumerate() {
            let flow = if k == 0 { lam } else { 50.0 + 10.0 * (t % 3) as f64 };
            text += &format!("{t},{a},{flow},{z}\n");
        }
    }
    let path = dir.join("history.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["rush_hour_rain_match", "symmetric"] {
        let o = run(&["validate", "--config", scenario(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["valid"], true);
        assert_eq!(v["approaches"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["validate"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["run", "--policy", "sometimes"]).status.code(), Some(1));
    let o = run(&["validate", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_green_bounds_name_the_approach() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("rush_hour_rain_match")).unwrap();
    let broken = text.replacen("green_min_s = 10", "green_min_s = 70", 1);
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, broken).unwrap();
    let o = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("intersection.approaches[0].green_min_s") && e.contains("a1"), "{e}");
}

#[test]
fn missing_anneal_section_is_defaulted_with_notice() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("rush_hour_rain_match")).unwrap();
    let start = text.find("[anneal]").unwrap();
    let end = text.find("[loop]").unwrap();
    let path = dir.path().join("noanneal.toml");
    std::fs::write(&path, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let o = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("anneal"));
    let quiet = run(&["validate", "--config", path.to_str().unwrap(), "--quiet"]);
    assert!(quiet.stderr.is_empty());
}

#[test]
fn fit_recovers_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let hist = write_history(dir.path(), &["a1", "a2"], 40);
    let o = run(&["fit", hist.to_str().unwrap(), "--p", "1", "--q", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = ModelDocument::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(doc.models.len(), 2);
    let m = &doc.models[0];
    assert_eq!(m.approach_id, "a1");
    assert!((m.alpha - 40.0).abs() < 1e-6, "{m:?}");
    assert!((m.beta[0] - 0.5).abs() < 1e-6);
    assert!((m.gamma[0] - 3.0).abs() < 1e-6);
    assert_eq!(m.exog_names, vec!["rain"]);
    assert!(m.report.as_ref().unwrap().residual_rmse < 1e-6);
}

#[test]
fn fit_single_approach_emits_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let hist = write_history(dir.path(), &["only"], 30);
    let o = run(&["fit", hist.to_str().unwrap(), "--p", "2", "--q", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = ModelDocument::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(doc.models.len(), 1);
    assert_eq!(doc.into_models().unwrap()[0].p(), 2);
}

#[test]
fn fit_rejects_q_mismatch_and_short_history() {
    let dir = tempfile::tempdir().unwrap();
    let hist = write_history(dir.path(), &["a1"], 30);
    let o = run(&["fit", hist.to_str().unwrap(), "--p", "1", "--q", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expected q=2"), "{}", stderr(&o));

    let hist = write_history(dir.path(), &["a1"], 5);
    let o = run(&["fit", hist.to_str().unwrap(), "--p", "2", "--q", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("insufficient history"), "{}", stderr(&o));
}

#[test]
fn run_writes_documented_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "run",
        "--config",
        scenario("rush_hour_rain_match").to_str().unwrap(),
        "--seed",
        "5",
        "--csv",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["seeds_used"], 1);
    let fixed = report["fixed"]["mean_wait_s"].as_f64().unwrap();
    let adaptive = report["adaptive"]["mean_wait_s"].as_f64().unwrap();
    let red = report["wait_reduction_pct"].as_f64().unwrap();
    assert!((red - 100.0 * (fixed - adaptive) / fixed).abs() < 1e-9);

    let csv = std::fs::read_to_string(out.join("intervals_fixed_seed5.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t_s,approach_id,queue,arrivals,departures,green_s,cum_wait_veh_s");
    assert_eq!(lines.count(), 24 * 4);
    assert!(out.join("intervals_adaptive_seed5.csv").exists());
    assert!(out.join("summary.csv").exists());
}

#[test]
fn policy_selects_arms() {
    let cfg = scenario("symmetric");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--policy", "fixed"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["fixed"].is_object());
    assert!(r.get("adaptive").is_none());
    assert!(r.get("wait_reduction_pct").is_none());
}

#[test]
fn loop_reports_bus_statistics() {
    let o = run(&["loop", "--config", scenario("rush_hour_rain_match").to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let stats = &r["loop_stats"];
    assert_eq!(stats["bus"]["dropped"], 0);
    assert_eq!(stats["decisions"], 24);
    assert_eq!(stats["bus"]["published_by_topic"]["traffic_signal_status/i1"], 24);
    assert_eq!(r["treated_arm"], "loop");
}

#[test]
fn output_failure_is_a_runtime_fault() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run(&[
        "run",
        "--config",
        scenario("symmetric").to_str().unwrap(),
        "--policy",
        "fixed",
        "--csv",
        blocker.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
