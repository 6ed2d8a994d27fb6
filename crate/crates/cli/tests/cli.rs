use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sepseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = sepseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    serde_json::from_str(err.trim()).expect("stderr is one JSON object")
}

/// phantom -> train -> predict -> evaluate, returning the primary outputs.
fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, String) {
    let data = root.join("data");
    ok(&[
        "phantom",
        "--seed",
        "7",
        "--out",
        s(&data),
        "--count",
        "2",
        "--dims",
        "8,16,16",
    ]);
    let cfg = root.join("c.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"paths":{{"data":{:?},"checkpoints":{:?}}},"train":{{"epochs":2,"batch_size":2,"patch":[8,16,16]}}}}"#,
            s(&data),
            s(&root.join("run"))
        ),
    )
    .unwrap();
    let summary = ok(&["train", "--config", s(&cfg), "--base", "4", "--scales", "2"]);
    let ckpt = summary["best_checkpoint"].as_str().unwrap().to_string();
    let labels = root.join("pred.lab.json");
    let probs = root.join("pred.prob.json");
    ok(&[
        "predict",
        "--checkpoint",
        &ckpt,
        "--in",
        s(&data.join("case_000.vol.json")),
        "--out-labels",
        s(&labels),
        "--out-probs",
        s(&probs),
    ]);
    let report = sepseg(&[
        "evaluate",
        "--pred",
        s(&labels),
        "--gt",
        s(&data.join("case_000.lab.json")),
    ]);
    assert!(report.status.success());
    (
        fs::read(&ckpt).unwrap(),
        fs::read(root.join("pred.prob")).unwrap(),
        String::from_utf8(report.stdout).unwrap(),
    )
}

#[test]
fn end_to_end_pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let report: Value = serde_json::from_str(&first.2).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 3);
    assert!(report["weighted"].is_object());
    assert!(a.path().join("run/train_log.jsonl").is_file());
    assert!(a.path().join("run/pipeline.json").is_file());
    let second = pipeline(b.path());
    assert_eq!(first.0, second.0, "checkpoints differ");
    assert_eq!(first.1, second.1, "probabilities differ");
    assert_eq!(first.2, second.2, "reports differ");
}

#[test]
fn transform_applies_preset_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "1", "--out", s(d), "--dims", "4,8,8"]);
    let out = d.join("t.vol.json");
    let v = ok(&[
        "transform",
        "--preset",
        "SLF1",
        "--in",
        s(&d.join("case_000.vol.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        v["anchors"]["hs"],
        serde_json::json!([-500.0, -200.0, 200.0, 1500.0])
    );
    let hu = sepseg_core::volgrid::load_volume(d.join("case_000.vol.json")).unwrap();
    let x = sepseg_core::volgrid::load_volume(&out).unwrap();
    let t = sepseg_core::xform::Preset::Slf1.spec();
    for (h, x) in hu.data().iter().zip(x.data()) {
        assert_eq!(*x, t.eval(f64::from(*h)) as f32);
    }
}

#[test]
fn ensemble_uncertainty_and_slices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&[
        "phantom",
        "--seed",
        "3",
        "--out",
        s(&data),
        "--count",
        "2",
        "--dims",
        "8,16,16",
    ]);
    let mut members = Vec::new();
    for (i, t) in ["SLF1", "NLF1"].iter().enumerate() {
        let run = d.join(format!("run{i}"));
        let r = ok(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--transform",
            t,
            "--epochs",
            "1",
            "--batch-size",
            "2",
            "--patch",
            "8,16,16",
            "--base",
            "4",
            "--scales",
            "2",
        ]);
        members.push(serde_json::json!({"checkpoint": r["best_checkpoint"], "transform": t}));
    }
    let spec = d.join("ens.json");
    fs::write(
        &spec,
        serde_json::json!({"members": members, "dsc_table": []}).to_string(),
    )
    .unwrap();
    let fused = d.join("fused.lab.json");
    let labels = d.join("members");
    let r = ok(&[
        "ensemble",
        "--spec",
        s(&spec),
        "--val",
        s(&data),
        "--in",
        s(&data.join("case_001.vol.json")),
        "--out-labels",
        s(&fused),
        "--member-labels",
        s(&labels),
    ]);
    assert_eq!(r["member_weights"].as_array().unwrap().len(), 2);
    let umap = d.join("u.unc.json");
    let rep = ok(&[
        "uncertainty",
        "--members",
        s(&labels.join("member_0.lab.json")),
        s(&labels.join("member_1.lab.json")),
        "--out-map",
        s(&umap),
        "--pred",
        s(&fused),
        "--gt",
        s(&data.join("case_001.lab.json")),
    ]);
    assert_eq!(rep["members"], 2);
    let slices = ok(&[
        "export-slices",
        "--in",
        s(&umap),
        "--out",
        s(&d.join("png")),
        "--index",
        "2",
    ]);
    assert_eq!(slices["files"].as_array().unwrap().len(), 1);
    let all = ok(&[
        "export-slices",
        "--in",
        s(&fused),
        "--out",
        s(&d.join("lab")),
        "--axis",
        "1",
    ]);
    assert_eq!(all["files"].as_array().unwrap().len(), 16);
}

#[test]
fn param_count_ratio_is_reported() {
    let v = ok(&[
        "param-count",
        "--net",
        "sepnet",
        "--base",
        "8",
        "--scales",
        "3",
    ]);
    let u = ok(&[
        "param-count",
        "--net",
        "unet",
        "--base",
        "8",
        "--scales",
        "3",
    ]);
    assert_eq!(v["params"], u["sepnet_params"]);
    assert_eq!(u["params"], v["unet_params"]);
    let r = v["ratio"].as_f64().unwrap();
    assert_eq!(
        r,
        v["sepnet_params"].as_f64().unwrap() / v["unet_params"].as_f64().unwrap()
    );
}

#[test]
fn config_errors_exit_2_and_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"train":{"epochs":0,"lr0":-1.0},"metric_preset":"nope","paths":{"data":"/no/such/dir"}}"#,
    )
    .unwrap();
    let out = sepseg(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    let msg = e["message"].as_str().unwrap();
    for needle in ["epochs", "lr0", "nope", "/no/such/dir"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    let out = sepseg(&["param-count", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    error_line(&out);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = sepseg(&[
        "evaluate",
        "--pred",
        s(&dir.path().join("missing.lab.json")),
        "--gt",
        s(&dir.path().join("missing.lab.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "data");
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "phantom",
        "transform",
        "train",
        "predict",
        "ensemble",
        "uncertainty",
        "evaluate",
        "export-slices",
        "param-count",
    ] {
        let out = sepseg(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--threads"), "{sub} help lacks --threads");
    }
}
