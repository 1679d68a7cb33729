use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn canfuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canfuse")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Value {
    let out = canfuse(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error(args: &[&str], dir: &Path) -> (i32, Value) {
    let out = canfuse(args, dir);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first = stderr.lines().next().unwrap_or_default();
    (out.status.code().unwrap(), serde_json::from_str(first).unwrap())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = ok(&["synth", "--seed", "1", "--n", "10", "--out", "d.cfz"], d);
    assert_eq!(s["samples"], 50);
    ok(&["compare", "--dataset", "d.cfz", "--seed", "7", "--epochs", "1", "--out", "report.json"], d);
    let r = read_json(&d.join("report.json"));
    for key in ["vision_only", "fused"] {
        assert!(r[key]["rmse_train"].as_f64().unwrap() > 0.0);
        assert!(r[key]["rmse_val"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(r["seed"], 7);
    assert_eq!(r["config"]["epochs"], 1);
    let (a, b) = (r["vision_only"]["rmse_val"].as_f64().unwrap(), r["fused"]["rmse_val"].as_f64().unwrap());
    assert_eq!(r["percent_decrease_val"].as_f64().unwrap(), 100.0 * (a - b) / a);
}

#[test]
fn train_eval_and_saved_predictions_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "2", "--n", "10", "--out", "d.cfz"], d);
    let t = ok(&["train", "--dataset", "d.cfz", "--with-can", "--epochs", "2", "--seed", "3", "--out", "m.ckpt"], d);
    let e = ok(&["eval", "--dataset", "d.cfz", "--model", "m.ckpt", "--with-can", "--predictions", "p.csv"], d);
    let reported = e["rmse"].as_f64().unwrap();
    assert_eq!(reported, t["val_rmse"].as_f64().unwrap());

    let text = std::fs::read_to_string(d.join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("timestamp_ms,group_id,prediction,label"));
    let (mut sq, mut n) = (0.0, 0);
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        sq += (f[2] - f[3]).powi(2);
        n += 1;
    }
    assert_eq!(n, 10);
    let independent = (sq / n as f64).sqrt();
    assert!((reported - independent).abs() <= 1e-12 * independent);

    let (code, err) = error(&["eval", "--dataset", "d.cfz", "--model", "m.ckpt", "--no-can"], d);
    assert_eq!(code, 1);
    assert_eq!(err["error"], "VariantMismatch");
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = canfuse(&["compare", "--dataset", "x.cfz", "--bogus-flag"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let (code, err) = error(&["fly"], d);
    assert_eq!((code, err["error"].as_str()), (2, Some("UnknownSubcommand")));
    let (code, err) = error(&["compare", "--dataset", "missing.cfz"], d);
    assert_eq!((code, err["error"].as_str()), (1, Some("Io")));
    std::fs::write(d.join("bad.cfz"), b"NOTADATASET").unwrap();
    let (_, err) = error(&["compare", "--dataset", "bad.cfz"], d);
    assert_eq!(err["error"], "BadMagic");
    let (_, err) = error(&["compare", "--dataset", "bad.cfz", "--epochs", "0"], d);
    assert_eq!(err["error"], "InvalidConfig");
}

#[test]
fn raw_recording_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = ok(&["synth", "--seed", "3", "--n", "60", "--raw", "raw"], d);
    let b = ok(&["build-dataset", "--raw", "raw", "--out", "built.cfz"], d);
    let matched = b["matched"].as_u64().unwrap() as f64;
    let dropped = b["dropped"].as_u64().unwrap() as f64;
    assert!(matched / (matched + dropped) >= 0.99, "{b}");
    for g in 1..=5 {
        let truth = s["raw"]["offsets_ms"][g.to_string()].as_f64().unwrap();
        let got = b["offset_ms"][g.to_string()].as_f64().unwrap();
        assert!((truth - got).abs() <= 1000.0 / 36.0, "group {g}: {truth} vs {got}");
    }

    // the same pipeline one stage at a time
    ok(&["decode", "--in", "raw/can.log", "--out", "rows.csv"], d);
    ok(&["frames", "--manifest", "raw/frames.csv", "--out", "unified.csv"], d);
    ok(&["sync", "--rows", "rows.csv", "--manifest", "unified.csv", "--groups", "raw/groups.csv", "--out", "staged.cfz"], d);
    assert_eq!(std::fs::read(d.join("built.cfz")).unwrap(), std::fs::read(d.join("staged.cfz")).unwrap());
}
