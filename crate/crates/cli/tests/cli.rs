use std::path::Path;
use std::process::{Command, Output};

fn didcont(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didcont"))
        .args(args)
        .env("DIDCONT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn emit(dir: &Path, name: &str, design: &str, n: usize, p: usize, seed: u64) -> String {
    let path = dir.join(name);
    let path_str = path.to_str().unwrap().to_owned();
    let out = didcont(&[
        "simulate",
        "--design",
        design,
        "--n",
        &n.to_string(),
        "--p",
        &p.to_string(),
        "--seed",
        &seed.to_string(),
        "--emit-data",
        &path_str,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    path_str
}

fn json_field(json: &str, path: &[&str]) -> f64 {
    let mut v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    for key in path {
        v = v[*key].take();
    }
    v.as_f64().unwrap_or_else(|| panic!("{path:?} missing in {json}"))
}

#[test]
fn equal_doses_give_zero() {
    let dir = tempfile::tempdir().unwrap();
    for design in ["panel", "rcs"] {
        let data = emit(dir.path(), &format!("{design}.csv"), design, 600, 5, 11);
        let out = didcont(&["estimate", "--data", &data, "--design", design, "--d", "1", "--dprime", "1", "--out", "json"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert_eq!(json_field(&stdout(&out), &["estimate", "delta_hat"]), 0.0);
    }
}

#[test]
fn missing_data_flag_prints_usage() {
    let out = didcont(&["estimate", "--design", "panel", "--d", "3", "--dprime", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let out = didcont(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("estimate"));
}

#[test]
fn single_replication_is_rejected() {
    let out = didcont(&["simulate", "--design", "panel", "--n", "200", "--p", "5", "--reps", "1", "--method", "under"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("reps must be >= 2"));
}

#[test]
fn malformed_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y_pre,y_post,d\n1,2,abc\n").unwrap();
    let bad = bad.to_str().unwrap();
    let out = didcont(&["estimate", "--data", bad, "--design", "panel", "--d", "3", "--dprime", "2"]);
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("missing.csv");
    std::fs::write(&missing, "y,d\n1,2\n").unwrap();
    let out =
        didcont(&["estimate", "--data", missing.to_str().unwrap(), "--design", "rcs", "--d", "3", "--dprime", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing column `t`"));

    let data = emit(dir.path(), "ok.csv", "panel", 300, 3, 1);
    let out = didcont(&["estimate", "--data", &data, "--design", "panel", "--d", "3", "--dprime", "2", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = didcont(&["estimate", "--data", &data, "--design", "panel", "--d", "3", "--dprime", "2", "--folds", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimation_failures_exit_two_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let data = emit(dir.path(), "p.csv", "panel", 400, 3, 5);
    // No dose lies within 0.01 of 3.9, so the treated group is empty.
    let out = didcont(&[
        "estimate", "--data", &data, "--design", "panel", "--d", "3.9", "--dprime", "1", "--bandwidth", "0.01",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("empty group") || msg.contains("empties under trimming") || msg.contains("empty local cell"), "{msg}");
}

#[test]
fn emitted_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for design in ["panel", "rcs"] {
        let first = emit(dir.path(), &format!("{design}_a.csv"), design, 600, 4, 3);
        let second = emit(dir.path(), &format!("{design}_b.csv"), design, 600, 4, 3);
        let a = std::fs::read(&first).unwrap();
        assert_eq!(a, std::fs::read(&second).unwrap());
        let header = String::from_utf8(a.clone()).unwrap().lines().next().unwrap().to_owned();
        let expected = if design == "panel" { "y_pre,y_post,d,x1,x2,x3,x4" } else { "y,d,t,x1,x2,x3,x4" };
        assert_eq!(header, expected);
        let out = didcont(&["estimate", "--data", &first, "--design", design, "--d", "1.5", "--dprime", "1", "--out", "csv"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert_eq!(stdout(&out).lines().count(), 2);
    }
}

#[test]
fn machine_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = emit(dir.path(), "p.csv", "panel", 800, 10, 9);
    let args =
        ["estimate", "--data", &data, "--design", "panel", "--d", "3", "--dprime", "2", "--bootstrap", "200", "--out", "json"];
    let a = didcont(&args);
    let b = didcont(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let report = stdout(&a);
    assert!(json_field(&report, &["bootstrap", "ci_low"]) < json_field(&report, &["bootstrap", "ci_high"]));
    assert!(!report.contains("duration"));

    let sim = ["simulate", "--design", "panel", "--n", "300", "--p", "5", "--reps", "3", "--method", "lasso,under", "--out", "json"];
    let a = didcont(&sim);
    let b = didcont(&sim);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 2);
}

#[test]
fn simulate_table_has_summary_columns() {
    let out = didcont(&["simulate", "--design", "panel", "--n", "300", "--p", "5", "--reps", "2", "--method", "under"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let header = text.lines().next().unwrap();
    for col in ["bias", "std", "rmse", "avse", "cover"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(text.lines().nth(1).unwrap().starts_with("panel under"));
}

#[test]
fn undersmoothed_panel_estimate_is_near_truth() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [1u64, 2] {
        let data = emit(dir.path(), &format!("panel_{seed}.csv"), "panel", 2000, 100, seed);
        let out = didcont(&[
            "estimate", "--data", &data, "--design", "panel", "--d", "3", "--dprime", "2", "--undersmooth", "2", "--out",
            "json",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let delta = json_field(&stdout(&out), &["estimate", "delta_hat"]);
        assert!((delta - 5.0).abs() < 0.5, "seed {seed}: {delta}");
    }
}
