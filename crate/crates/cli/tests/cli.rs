use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_derm-foundry");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn outputs(dir: &Path) -> PathBuf {
    dir.join("outputs")
}

#[test]
fn probe_on_fixture_data_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["probe"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(outputs(tmp.path()).join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value"));
    assert!(metrics.contains("auroc"));
    assert!(tmp.path().join("config.resolved.json").is_file());
    assert!(tmp.path().join("logs/run.log").is_file());
}

#[test]
fn unknown_hyperparameter_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["finetune", "--set", "lerning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));
}

#[test]
fn malformed_set_pair_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["probe", "--set", "lambda"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_64() {
    let o = Command::new(BIN).arg("distill").output().unwrap();
    assert_eq!(o.status.code(), Some(64));
    let o = Command::new(BIN).output().unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn help_exits_0() {
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("seg-train"));
}

#[test]
fn report_on_empty_run_dir_exits_3_listing_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&tmp.path().join("rep"), &["report", "--runs", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("predictions.csv") && err.contains("km_curve.csv"), "{err}");
}

#[test]
fn survival_writes_curve_and_png() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["survival", "--horizons", "24,48"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = outputs(tmp.path());
    let km = std::fs::read_to_string(out.join("km_curve.csv")).unwrap();
    assert!(km.lines().count() > 10);
    let png = std::fs::read(out.join("km_plot.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let tauc = std::fs::read_to_string(out.join("tauc.csv")).unwrap();
    assert_eq!(tauc.lines().count(), 3, "{tauc}");
}

#[test]
fn bad_horizon_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["survival", "--horizons", "24,soon"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("soon"));
}

fn write_predictions(path: &Path, probs: &[f64]) {
    let mut s = String::from("id,true_label,prob_0,prob_1\n");
    for (i, p) in probs.iter().enumerate() {
        s.push_str(&format!("x{i},{},{},{}\n", i % 2, 1.0 - p, p));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn two_prediction_files_give_a_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let good: Vec<f64> = (0..40).map(|i| if i % 2 == 1 { 0.8 } else { 0.2 } + (i as f64) * 1e-3).collect();
    let poor: Vec<f64> = (0..40).map(|i| ((i * 7919) % 40) as f64 / 40.0).collect();
    let (a, b) = (tmp.path().join("good.csv"), tmp.path().join("poor.csv"));
    write_predictions(&a, &good);
    write_predictions(&b, &poor);
    let rep = tmp.path().join("rep");
    let o = run(&rep, &["report", "--runs", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(outputs(&rep).join("report.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert_eq!(header, "model,metric,point,ci_low,ci_high,p_vs_good,stars");
    let auroc = table.lines().find(|l| l.starts_with("poor,auroc")).expect("poor auroc row");
    let p: f64 = auroc.split(',').nth(5).unwrap().parse().unwrap();
    assert!(p < 0.05, "{auroc}");
    assert!(outputs(&rep).join("metric_bars.png").is_file());
}

#[test]
fn config_file_and_env_layer_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "folds": 4}"#).unwrap();
    let out = tmp.path().join("run");
    let o = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["oof", "--folds", "3"])
        .env("DERMFOUNDRY_CFG_STRATIFY_BY", "none")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["hyperparameters"]["folds"], 3);
    assert_eq!(resolved["hyperparameters"]["stratify_by"], "none");
}

#[test]
fn seg_predict_without_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["seg-predict"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let files = ["metrics.csv", "metrics.json", "predictions.csv"];
    let mut seen = vec![];
    for rep in 0..2 {
        let dir = tmp.path().join(format!("r{rep}"));
        let o = run(&dir, &["--seed", "9", "oof"]);
        assert!(o.status.success(), "{}", stderr(&o));
        seen.push(files.map(|f| std::fs::read(outputs(&dir).join(f)).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
}

/// Every subcommand end to end on tiny synthetic settings.
#[test]
fn every_subcommand_runs_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cases: Vec<(&str, Vec<&str>, &[&str])> = vec![
        ("pre", vec!["pretrain", "--set", "synthetic_size=4", "--set", "total_epochs=1"], &["pretrain_loss.csv", "checkpoint"]),
        ("ft", vec!["finetune", "--epochs", "1"], &["epochs.csv", "predictions.csv", "checkpoint"]),
        ("seg", vec!["seg-train", "--epochs", "1", "--set", "synthetic_size=10"], &["seg_metrics.csv", "checkpoint", "masks"]),
        ("seq", vec!["seqprep", "--set", "synthetic_size=2", "--stages", "hair,warp"], &["report.csv", "pairs"]),
        ("chg", vec!["change-train", "--epochs", "1", "--set", "synthetic_size=10"], &["epochs.csv", "checkpoint"]),
        ("chge", vec!["change-eval", "--epochs", "1", "--set", "synthetic_size=10", "--preproc", "default,warp"], &["arms.csv", "predictions_warp.csv"]),
        ("tbp", vec!["tbp-screen", "--modules", "ud,ml"], &["decisions.csv", "report.json"]),
        ("mil", vec!["mil-train", "--epochs", "2", "--folds", "3", "--set", "synthetic_size=12"], &["folds.csv", "summary.json"]),
    ];
    for (name, args, expect) in &cases {
        let o = run(&p(name), args);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        for f in *expect {
            assert!(outputs(&p(name)).join(f).exists(), "{name} missing {f}");
        }
    }
    // Checkpoints written above load back into the downstream commands.
    let ck = outputs(&p("pre")).join("checkpoint");
    let o = run(&p("probe_ck"), &["probe", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seg_ck = outputs(&p("seg")).join("checkpoint");
    let o = run(&p("segp"), &["seg-predict", "--checkpoint", seg_ck.to_str().unwrap(), "--set", "synthetic_size=10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let arms = std::fs::read_to_string(outputs(&p("chge")).join("arms.csv")).unwrap();
    assert_eq!(arms.lines().count(), 3, "{arms}");
}
