use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embrecon")).args(args).output().expect("spawn embrecon")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "embrecon {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// gen-data → train in `dir`, small enough to run in well under a second.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let train = dir.join("train");
    ok(&["gen-data", "--out-dir", &s(&data), "--n", "20", "--d", "8", "--seed", "1"]);
    ok(&["train", "--out-dir", &s(&train), "--data", &s(&data.join("data.csv")), "--hidden", "20", "--epochs", "500", "--checkpoint-every", "250"]);
    (data.join("data.csv"), train.join("model.json"))
}

fn sweep(dir: &Path, model: &Path, workers: &str) {
    ok(&[
        "sweep", "--out-dir", &s(dir), "--model", &s(model), "--runs", "4", "--m", "20", "--iterations", "50", "--workers", workers,
    ]);
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained(tmp.path());
    let sw = tmp.path().join("sweep");
    sweep(&sw, &model, "1");
    let ev = tmp.path().join("eval");
    ok(&["evaluate", "--out-dir", &s(&ev), "--model", &s(&model), "--data", &s(&data), "--pool", &s(&sw.join("pool.csv"))]);

    let summary = json(&ev.join("summary.json"));
    assert_eq!(summary["n"], 20);
    assert_eq!(summary["candidates"], 80);
    assert_eq!(summary["runs"], 4);
    for f in ["eval.csv", "margin.csv", "matched.csv", "topk.csv", "manifest.json"] {
        assert!(ev.join(f).is_file(), "{f}");
    }
    let manifest = json(&ev.join("manifest.json"));
    assert_eq!(manifest["subcommand"], "evaluate");
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
    assert!(tmp.path().join("train/checkpoints/epoch_0000250.json").is_file());

    let cl = tmp.path().join("cluster");
    ok(&[
        "cluster", "--out-dir", &s(&cl), "--pool", &s(&sw.join("pool.csv")), "--data", &s(&data), "--model", &s(&model), "--maxclust",
        "10", "--k-largest", "5", "--maxclust-sweep", "2,10,m",
    ]);
    let reps = std::fs::read_to_string(cl.join("representatives.csv")).unwrap();
    assert_eq!(reps.lines().count(), 6);
    assert!(cl.join("maxclust_sweep.csv").is_file());

    let rp = tmp.path().join("report");
    ok(&["report", "--out-dir", &s(&rp), "--model", &s(&model), "--data", &s(&data), "--pool", &s(&sw.join("pool.csv"))]);
    assert!(rp.join("summary.txt").is_file());
}

#[test]
fn sweep_defaults_to_500_candidates_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, model) = trained(tmp.path());
    let sw = tmp.path().join("sweep");
    ok(&["sweep", "--out-dir", &s(&sw), "--model", &s(&model), "--runs", "1", "--iterations", "1"]);
    assert_eq!(json(&sw.join("sweep_summary.json"))["candidates"], 500);
}

#[test]
fn reruns_and_worker_counts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained(tmp.path());
    let mut outputs = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let sw = tmp.path().join(name);
        sweep(&sw, &model, workers);
        let ev = sw.join("eval");
        ok(&["evaluate", "--out-dir", &s(&ev), "--model", &s(&model), "--data", &s(&data), "--pool", &s(&sw.join("pool.csv"))]);
        outputs.push((std::fs::read(sw.join("pool.csv")).unwrap(), std::fs::read(ev.join("eval.csv")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = run(&["train", "--out-dir", &s(tmp.path()), "--data", &s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]: "), "{err}");

    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[usage]: "));

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"hiddn": 3}"#).unwrap();
    let out = run(&["gen-data", "--out-dir", &s(tmp.path()), "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]: "));

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "label,x0,x1\n1,0.5\n").unwrap();
    let out = run(&["train", "--out-dir", &s(tmp.path()), "--data", &s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out-dir", &s(&data), "--n", "10", "--d", "4"]);
    let cfg = tmp.path().join("train.json");
    std::fs::write(&cfg, r#"{"hidden": 7, "epochs": 30}"#).unwrap();
    let out = tmp.path().join("train");
    ok(&["train", "--out-dir", &s(&out), "--data", &s(&data.join("data.csv")), "--config", &s(&cfg), "--hidden", "9"]);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["hidden"], 9);
    assert_eq!(manifest["config"]["epochs"], 30);
    assert_eq!(manifest["config"]["lr"], 0.01);
    assert_eq!(json(&out.join("train_summary.json"))["hidden"], 9);
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 30);
}

#[test]
fn inputs_are_never_modified_or_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained(tmp.path());
    let before = (std::fs::read(&data).unwrap(), std::fs::read(&model).unwrap());
    let sw = tmp.path().join("sweep");
    sweep(&sw, &model, "1");
    ok(&["evaluate", "--out-dir", &s(&sw), "--model", &s(&model), "--data", &s(&data), "--pool", &s(&sw.join("pool.csv"))]);
    assert_eq!(before, (std::fs::read(&data).unwrap(), std::fs::read(&model).unwrap()));

    // The training set named like an output of `train` in the same directory.
    let dir = tmp.path().join("clash");
    std::fs::create_dir_all(&dir).unwrap();
    let clash = dir.join("history.csv");
    std::fs::copy(&data, &clash).unwrap();
    let out = run(&["train", "--out-dir", &s(&dir), "--data", &s(&clash), "--hidden", "5", "--epochs", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("would overwrite an input"));
    assert_eq!(std::fs::read(&clash).unwrap(), before.0);
}

#[test]
fn image_pipeline_scores_ssim() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&[
        "gen-data", "--out-dir", &s(&p("data")), "--kind", "images", "--n", "8", "--ch", "1", "--h", "6", "--w", "6", "--embed-dim", "8",
        "--backbone-hidden", "16",
    ]);
    ok(&["train", "--out-dir", &s(&p("train")), "--data", &s(&p("data/data.csv")), "--hidden", "16", "--epochs", "300"]);
    let model = p("train/model.json");
    sweep(&p("sweep"), &model, "1");
    let eval_args = |out: &Path| {
        vec![
            "evaluate".to_string(),
            "--out-dir".into(),
            s(out),
            "--model".into(),
            s(&model),
            "--data".into(),
            s(&p("data/data.csv")),
            "--pool".into(),
            s(&p("sweep/pool.csv")),
        ]
    };
    let first: Vec<String> = eval_args(&p("eval"));
    ok(&first.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&[
        "invert", "--out-dir", &s(&p("inv")), "--backbone", &s(&p("data/backbone.json")), "--targets", &s(&p("eval/matched.csv")),
        "--iterations", "50",
    ]);
    let inv = json(&p("inv/invert_summary.json"));
    assert_eq!(inv["rows"], 8);
    let trace = std::fs::read_to_string(p("inv/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 8 * 51);

    let mut second = eval_args(&p("eval2"));
    second.extend(["--train-images".into(), s(&p("data/images.csv")), "--recon-images".into(), s(&p("inv/inverted.csv"))]);
    ok(&second.iter().map(String::as_str).collect::<Vec<_>>());
    let summary = json(&p("eval2/summary.json"));
    assert!(summary["good_with_ssim"].is_u64());
    let eval = std::fs::read_to_string(p("eval2/eval.csv")).unwrap();
    let header: Vec<&str> = eval.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ssim").expect("ssim column");
    for row in eval.lines().skip(1) {
        let v: f64 = row.split(',').nth(col).unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }
}
