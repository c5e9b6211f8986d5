use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fetr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("run");
    let manifest = fixture("shared/manifest.json");
    let out = fetr(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--eta",
        "0.5",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("mse "));
    for suffix in [".report.json", ".trace.csv", ".sigma1.csv", ".sigma2.csv", ".weights.csv"] {
        let mut p = prefix.as_os_str().to_owned();
        p.push(suffix);
        assert!(Path::new(&p).exists(), "missing {suffix}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["eta"], 0.5);
    assert_eq!(report["config"]["l"], 1e-3);
    assert_eq!(report["task_names"][1], "second");
}

#[test]
fn train_with_random_features() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("rff");
    let out = fetr(&[
        "train",
        "--manifest",
        fixture("shared/manifest.json").to_str().unwrap(),
        "--rff",
        "16,1.0",
        "--orthogonal",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let w = std::fs::read_to_string(dir.path().join("rff.weights.csv")).unwrap();
    assert_eq!(w.lines().count(), 16);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"eta": 3.0, "u": 50.0}"#).unwrap();
    let prefix = dir.path().join("run");
    let out = fetr(&[
        "train",
        "--manifest",
        fixture("shared/manifest.json").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--u",
        "20",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["eta"], 3.0);
    assert_eq!(report["config"]["u"], 20.0);
    assert_eq!(report["config"]["l"], 1e-3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("x");
    let missing = fetr(&["train", "--manifest", "/no/such/manifest.json", "--out", prefix.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3), "{}", stderr(&missing));

    let sylvester = fetr(&[
        "train",
        "--manifest",
        fixture("per_task/manifest.json").to_str().unwrap(),
        "--w-solver",
        "sylvester",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(sylvester.status.code(), Some(4));
    assert!(stderr(&sylvester).contains("unsupported data shape"));

    let bad_flag = fetr(&["train", "--manifest", "m.json", "--w-solver", "newton"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let bad_bounds = fetr(&[
        "train",
        "--manifest",
        fixture("shared/manifest.json").to_str().unwrap(),
        "--l",
        "10",
        "--u",
        "1",
    ]);
    assert_eq!(bad_bounds.status.code(), Some(2));
    assert_eq!(fetr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn per_task_training_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("pt");
    let out = fetr(&[
        "train",
        "--manifest",
        fixture("per_task/manifest.json").to_str().unwrap(),
        "--metric",
        "nmse",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("nmse "));
}

#[test]
fn cv_finds_realizable_fit_and_is_deterministic() {
    let manifest = fixture("shared/manifest.json");
    let args = [
        "cv",
        "--manifest",
        manifest.to_str().unwrap(),
        "--folds",
        "10",
        "--eta-grid",
        "1e-5..1e3",
        "--metric",
        "nmse",
        "--seed",
        "3",
    ];
    let a = fetr(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let json: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert!(json["best_mean"].as_f64().unwrap() <= 1e-6, "{json}");
    assert_eq!(json["cells"].as_array().unwrap().len(), 9);
    let b = fetr(&args);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn cv_with_too_many_folds_is_a_data_error() {
    let out = fetr(&[
        "cv",
        "--manifest",
        fixture("per_task/manifest.json").to_str().unwrap(),
        "--folds",
        "13",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn bench_writes_timings() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("b");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"closed_form_max_dim": 30}"#).unwrap();
    let out = fetr(&[
        "bench-w",
        "--n",
        "300",
        "--grid",
        "4,3;8,5",
        "--repeats",
        "4",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(summary.contains("8,5,closed,capacity"));
    let samples = std::fs::read_to_string(dir.path().join("b.samples.csv")).unwrap();
    // 3 solvers at the first point, 2 at the second.
    assert_eq!(samples.lines().count() - 1, 4 * 5);
}

#[test]
fn compare_writes_traces_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("c");
    let out = fetr(&[
        "compare",
        "--synthetic",
        "300,6,3",
        "--budget-seconds",
        "1",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.summary.json")).unwrap()).unwrap();
    let methods = summary["methods"].as_array().unwrap();
    let fetr_final = methods[0]["final_objective"].as_f64().unwrap();
    for m in methods {
        assert!(fetr_final <= m["final_objective"].as_f64().unwrap() + 1e-6);
        let name = m["name"].as_str().unwrap();
        let trace = std::fs::read_to_string(dir.path().join(format!("c.{name}.csv"))).unwrap();
        assert!(trace.lines().count() > 1);
        for line in trace.lines().skip(1) {
            let seconds: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            // The budget is checked between blocks, so allow one block of overrun.
            assert!(seconds <= 1.5, "{name}: {seconds}");
        }
    }
}

#[test]
fn compare_without_fudge_reports_singularity() {
    let dir = tempfile::tempdir().unwrap();
    let out = fetr(&[
        "compare",
        "--synthetic",
        "200,5,3",
        "--budget-seconds",
        "0.5",
        "--fudge",
        "0",
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("singularity"));
}
