//! Drives the `mmcdr` binary through the whole pipeline.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "data": {"synthetic": {"source_users": 80, "target_users": 70, "source_items": 50, "target_items": 45}},
  "cluster": {"k": 4},
  "model": {"dim": 8},
  "train": {"epochs": 2, "batch_size": 16, "learning_rate": 0.01, "matching_max_iters": 30, "seeds": [1, 2]}
}"#;

fn mmcdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmcdr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mmcdr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and parsed single-line error of a failing run.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = mmcdr(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    let code = out.status.code().unwrap();
    assert_eq!(v["exit_code"], code);
    (code, v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let (data, graphs) = (root.join("data"), root.join("graphs"));

    ok(&["gen", "--config", s(&cfg), "--seed", "7", "--out", s(&data)]);
    ok(&["fuse", "--config", s(&cfg), "--data", s(&data), "--out", s(&graphs)]);
    ok(&["cluster", "--config", s(&cfg), "--seed", "7", "--graphs", s(&graphs), "--out", s(&graphs)]);
    assert!(graphs.join("clusters_source.tsv").exists());

    let runs = [root.join("run1"), root.join("run2")];
    for r in &runs {
        ok(&["train", "--config", s(&cfg), "--seed", "7", "--data", s(&data), "--graphs", s(&graphs), "--out", s(r)]);
    }
    for f in ["trace.csv", "config.json", "checkpoint/manifest.json", "checkpoint/tensors.bin"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let trace = std::fs::read_to_string(runs[0].join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "epoch,loss_total,loss_rs,loss_rt,loss_c,hr10_val_s,hr10_val_t");
    assert_eq!(trace.lines().count(), 3);

    let metrics = root.join("metrics.csv");
    let csv = ok(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&runs[0].join("checkpoint")), "--data", s(&data), "--graphs", s(&graphs), "--out", s(&metrics),
    ]);
    assert_eq!(csv, std::fs::read_to_string(&metrics).unwrap());
    assert_eq!(csv.lines().count(), 5);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (hr, ndcg): (f64, f64) = (cols[3].parse().unwrap(), cols[4].parse().unwrap());
        assert!((0.0..=1.0).contains(&hr) && ndcg <= hr);
    }

    let abl = root.join("ablation");
    let summary = ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--graphs", s(&graphs), "--out", s(&abl)]);
    assert_eq!(summary, std::fs::read_to_string(abl.join("ablation_summary.csv")).unwrap());
    let rows = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    // four variants, two domains, two seeds
    assert_eq!(rows.lines().count(), 1 + 4 * 2 * 2);
}

#[test]
fn standalone_matching_writes_a_plan() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("s.tsv"), "a\t0\t0\nb\t1\t0\nc\t0\t1\n").unwrap();
    std::fs::write(root.join("t.tsv"), "x\t1\t0\ny\t0\t1\nz\t0\t0\n").unwrap();
    std::fs::write(root.join("pairs.tsv"), "a\tz\n").unwrap();
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, r#"{"matching": {"epsilon": 0.5}}"#).unwrap();
    let plan = root.join("plan.tsv");
    ok(&[
        "match", "--config", s(&cfg), "--source", s(&root.join("s.tsv")), "--target", s(&root.join("t.tsv")), "--overlap", s(&root.join("pairs.tsv")), "--out", s(&plan),
    ]);
    let text = std::fs::read_to_string(&plan).unwrap();
    assert!(text.starts_with("# n=3 eps=0.5"), "{text}");
}

#[test]
fn errors_are_single_json_lines_with_typed_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let (code, v) = failure(&["frobnicate"]);
    assert_eq!((code, v["error"].as_str().unwrap()), (2, "usage"));

    let (code, _) = failure(&["gen", "--out", s(root), "--threads", "0"]);
    assert_eq!(code, 2);

    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"graph": {"zz": 1}}"#).unwrap();
    let (code, v) = failure(&["gen", "--config", s(&bad), "--out", s(root)]);
    assert_eq!((code, v["error"].as_str().unwrap()), (3, "schema"));

    let (code, v) = failure(&["fuse", "--data", s(&root.join("missing")), "--out", s(root)]);
    assert_eq!(code, 3, "{v}");

    // a hopeless budget at tiny ε must surface as a convergence failure
    std::fs::write(root.join("s.tsv"), "a\t0\t0\nb\t1\t0\nc\t0\t1\n").unwrap();
    std::fs::write(root.join("t.tsv"), "x\t1\t0\ny\t0\t1\nz\t0.5\t0.5\n").unwrap();
    let tight = root.join("tight.json");
    std::fs::write(&tight, r#"{"matching": {"epsilon": 0.001, "max_iters": 1}}"#).unwrap();
    let (src, tgt, out) = (root.join("s.tsv"), root.join("t.tsv"), root.join("p.tsv"));
    let args = ["match", "--config", s(&tight), "--source", s(&src), "--target", s(&tgt), "--out", s(&out)];
    let (code, v) = failure(&args);
    assert_eq!((code, v["error"].as_str().unwrap()), (4, "convergence"));
    let mut relaxed = args.to_vec();
    relaxed.push("--allow-unconverged");
    ok(&relaxed);
}

#[test]
fn help_exits_cleanly() {
    let out = ok(&["--help"]);
    for cmd in ["gen", "fuse", "cluster", "match", "train", "eval", "ablate"] {
        assert!(out.contains(cmd));
    }
}
