use std::path::Path;
use std::process::{Command, Output};

use favae::datasets::TrajectoryDataset;

fn favae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_favae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = favae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &["--set", "channels=4", "--set", "seq_len=20", "--set", "epochs=3", "--set", "seed=5"];

#[test]
fn gen_data_writes_reaching_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reach.favd");
    let csv = dir.path().join("reach.csv");
    ok(&["gen-data", "2d-reaching", "--length", "100", "--out", p(&out), "--csv", p(&csv)]);
    let data = TrajectoryDataset::load(&out).unwrap();
    assert_eq!(data.len(), 20);
    assert_eq!(data.seq_len, 100);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 20 * 100);
}

#[test]
fn bad_usage_fails() {
    let out = favae(&["gen-data", "2d-reaching", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!favae(&["frobnicate"]).status.success());
    let out = favae(&["eval-mig", "--checkpoint", "/nonexistent/ck.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!favae(&["gen-data", "no-such-set", "--out", "/tmp/x.favd"]).status.success());
}

#[test]
fn train_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "checkpoint_every=2"]);
    let summary: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(summary["steps"], 3);
    for f in ["config.txt", "loss.csv", "final.json", "mig.json", "checkpoints/step_00000002.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let ck = run.join("final.json");
    let csv = dir.path().join("trav.csv");
    let svg = dir.path().join("trav.svg");
    ok(&["traverse", "--checkpoint", p(&ck), "--ladder", "2", "--dim", "1", "--csv", p(&csv), "--svg", p(&svg)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 8 * 20);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
    let out = favae(&["traverse", "--checkpoint", p(&ck), "--ladder", "3", "--dim", "0", "--csv", p(&csv)]);
    assert!(!out.status.success());

    let kl: serde_json::Value =
        serde_json::from_str(&ok(&["decompose-kl", "--checkpoint", p(&ck), "--samples", "64"])).unwrap();
    for k in ["index_code_mi", "total_correlation", "dimwise_kl", "mean_kl"] {
        assert!(kl[k].is_number(), "{k}");
    }

    let a = ok(&["eval-mig", "--checkpoint", p(&ck)]);
    let b = ok(&["eval-mig", "--checkpoint", p(&ck)]);
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(report["mig"].is_number() && report["concentration_flag"].is_boolean());
}

#[test]
fn untrained_model_has_near_zero_mig() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("init");
    ok(&["train", "--out", p(&run), "--set", "epochs=0", "--set", "seed=3"]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval-mig", "--checkpoint", p(&run.join("final.json"))])).unwrap();
    let mig = report["mig"].as_f64().unwrap();
    assert!(mig < 0.1, "{mig}");
}

#[test]
fn experiment_summary_schema() {
    let mut args = vec!["experiment", "--repeats", "2", "--max-reruns", "0"];
    args.extend_from_slice(TINY);
    let summary: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    for k in ["mig_mean", "mig_std", "rec_mean", "rec_std"] {
        assert!(summary[k].is_number(), "{k}");
    }
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["attribution"]["counts"].as_array().unwrap().len(), 3);
}
