use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use segprune::cli::main_with_args;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["segprune".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    main_with_args(full)
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/deeplabv3_resnet50_os8.json")
}

/// Small dataset and a tiny-segnet built from it, shared by several tests.
fn setup(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let data = tmp.path().join("data");
    assert_eq!(run(&["--seed", "1", "--out", &p(&data), "synth", "--count", "16", "--size", "32"]), 0);
    let model = tmp.path().join("build");
    assert_eq!(run(&["--seed", "2", "--out", &p(&model), "build", "--arch", "tiny-segnet", "--input", "32x32"]), 0);
    (data, model.join("model.json"))
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"format\": 7").unwrap();
    let out = p(&tmp.path().join("o"));
    assert_eq!(run(&["--out", &out, "prune", "--model", &p(&bad), "--sparsity", "0.5"]), 2);
    assert_eq!(run(&["--out", &out, "lint", "--arch", &p(&fixture()), "--input", "112x112"]), 4);
    assert_eq!(run(&["--out", &out, "lint", "--arch", &p(&fixture()), "--input", "1024x1024"]), 0);
    assert_eq!(run(&["--out", &out, "build", "--arch", "no-such-net"]), 2);

    // The binary forwards the same code to the shell.
    let status = Command::new(env!("CARGO_BIN_EXE_segprune"))
        .args(["--out", &out, "lint", "--arch", "deeplabv3-resnet50-os8", "--input", "112x112"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(4));
}

#[test]
fn prune_selection_and_identity() {
    let tmp = TempDir::new().unwrap();
    let (_, model) = setup(&tmp);
    let out = tmp.path().join("r3");
    assert_eq!(run(&["--out", &p(&out), "prune", "--model", &p(&model), "--run-index", "3"]), 0);
    let rep = json(out.join("prune.json"));
    assert_eq!(rep["target"].as_f64(), Some(0.875));
    assert!(out.join("sparsity.pgm").exists());

    let out = tmp.path().join("f0");
    assert_eq!(run(&["--out", &p(&out), "prune", "--model", &p(&model), "--filters", "0"]), 0);
    let a = segprune::io::load(&model).unwrap();
    let b = segprune::io::load(out.join("model.json")).unwrap();
    assert_eq!(a.arch(), b.arch());
    assert_eq!(a.params(), b.params());

    assert_eq!(run(&["--out", &p(&out), "prune", "--model", &p(&model)]), 2);
}

#[test]
fn replay_and_seeded_training_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = setup(&tmp);
    let first = tmp.path().join("t1");
    let args = |o: &Path| {
        vec![
            "--seed".to_string(),
            "9".into(),
            "--out".into(),
            p(o),
            "train".into(),
            "--model".into(),
            p(&model),
            "--data".into(),
            p(&data),
            "--epochs".into(),
            "2".into(),
            "--batch-size".into(),
            "4".into(),
        ]
    };
    assert_eq!(main_with_args(std::iter::once("segprune".to_string()).chain(args(&first))), 0);
    let second = tmp.path().join("t2");
    assert_eq!(main_with_args(std::iter::once("segprune".to_string()).chain(args(&second))), 0);
    assert_eq!(fs::read(first.join("history.json")).unwrap(), fs::read(second.join("history.json")).unwrap());

    let replay = tmp.path().join("t3");
    assert_eq!(run(&["--replay", &p(&first.join("options.json")), "--out", &p(&replay)]), 0);
    for f in ["history.json", "train.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(replay.join(f)).unwrap(), "{f}");
    }
    assert_eq!(json(first.join("options.json"))["command"], json(replay.join("options.json"))["command"]);
}

#[test]
fn finetune_lr_decrement() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = setup(&tmp);
    let out = tmp.path().join("ft");
    let code = run(&[
        "--out", &p(&out), "finetune", "--model", &p(&model), "--data", &p(&data), "--filters", "0.5",
        "--epochs", "2", "--batch-size", "8", "--peak-lr", "8e-5", "--lr-decrement", "1e-5", "--run", "2",
    ]);
    assert_eq!(code, 0);
    let rep = json(out.join("finetune.json"));
    assert!((rep["peak_lr"].as_f64().unwrap() - 7e-5).abs() < 1e-15);
    assert_eq!(rep["run"].as_u64(), Some(2));

    let lrs: Vec<f64> = (1..=3).map(|k| segprune::train::peak_lr_for_run(8e-5, 1e-5, k).unwrap()).collect();
    for (got, want) in lrs.iter().zip([8e-5, 7e-5, 6e-5]) {
        assert!((got - want).abs() < 1e-15, "{lrs:?}");
    }

    let code = run(&["--out", &p(&out), "train", "--model", &p(&model), "--data", &p(&data), "--epochs", "0"]);
    assert_eq!(code, 2);
}

#[test]
fn report_over_filter_runs() {
    let tmp = TempDir::new().unwrap();
    let (data, model) = setup(&tmp);
    let runs = tmp.path().join("runs");
    for (i, f) in ["0", "0.25", "0.5", "0.625", "0.75", "0.875"].iter().enumerate() {
        let dir = runs.join(format!("f{i}"));
        assert_eq!(run(&["--out", &p(&dir), "prune", "--model", &p(&model), "--filters", f]), 0);
        let m = p(&dir.join("model.json"));
        assert_eq!(run(&["--out", &p(&dir), "eval", "--model", &m, "--data", &p(&data)]), 0);
        assert_eq!(run(&["--out", &p(&dir), "bench", "--model", &m, "--input", "32x32", "--warmup", "1", "--iters", "10"]), 0);
    }
    let out = tmp.path().join("report");
    assert_eq!(run(&["--out", &p(&out), "report", "--runs", &p(&runs)]), 0);
    let csv = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}");
    assert!(fs::read_to_string(out.join("report.md")).unwrap().contains("f5"));
}
