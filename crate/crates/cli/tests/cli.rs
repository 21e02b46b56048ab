use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn msvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvit"))
        .args(args)
        .env_remove("MSVIT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msvit(args);
    assert!(
        out.status.success(),
        "msvit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    msvit(args).status.code().expect("exited")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny synthetic run; finishes in seconds.
fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--profile",
        "tiny",
        "--timesteps",
        "2",
        "--dataset",
        "synth",
        "--per-class",
        "2",
        "--test-per-class",
        "1",
        "--batch",
        "4",
        "--out",
        out,
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn inspect_reports_token_counts_and_size() {
    let text = ok(&["inspect", "--profile", "msvit-10-768"]);
    assert!(text.contains("tokens 3136 (N)"), "{text}");
    assert!(text.contains("tokens 784 (N/4)"), "{text}");
    assert!(text.contains("tokens 196 (N/16)"), "{text}");
    let first = text.lines().next().unwrap();
    let millions: f64 = first
        .split('(')
        .nth(1)
        .and_then(|s| s.split('M').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((millions / 69.80 - 1.0).abs() <= 0.15, "{first}");
}

#[test]
fn inspect_output_loads_back_to_the_same_model() {
    let dir = tempdir().unwrap();
    let text = ok(&["inspect", "--profile", "tiny"]);
    let file = dir.path().join("tiny.toml");
    fs::write(&file, &text).unwrap();
    let again = ok(&["inspect", "--config", path(&file)]);
    let hash = |s: &str| s.lines().next().unwrap().rsplit(' ').next().unwrap().to_string();
    assert_eq!(hash(&text), hash(&again));
    assert_eq!(text, again);
}

#[test]
fn ann_equivalent_is_e_mac_times_flops() {
    let dir = tempdir().unwrap();
    ok(&[
        "profile",
        "--profile",
        "tiny",
        "--ann-equivalent",
        "--out",
        path(dir.path()),
    ]);
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("profile.json")).unwrap()).unwrap();
    let flops = v["total_flops_per_step"].as_u64().unwrap();
    let layer_sum: u64 = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["flops_per_step"].as_u64().unwrap())
        .sum();
    assert_eq!(flops, layer_sum);
    let pj = v["ann_equivalent_pj"].as_f64().unwrap();
    assert!((pj - 4.6 * flops as f64).abs() <= 1e-9 * pj, "{pj} vs {flops}");
}

#[test]
fn deterministic_training_is_byte_reproducible() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&train_args(
            path(out),
            &["--epochs", "2", "--seed", "7", "--deterministic"],
        ));
    }
    for file in ["metrics.csv", "summary.json", "model.ckpt"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    // Header plus train and test rows for each of two epochs.
    assert_eq!(metrics.lines().count(), 5, "{metrics}");
}

#[test]
fn trained_checkpoint_evaluates_and_profiles() {
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_args(path(&run), &["--epochs", "1", "--deterministic"]));
    let ckpt = run.join("model.ckpt");
    let eval_out = dir.path().join("eval");
    let text = ok(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--dataset",
        "synth",
        "--test-per-class",
        "1",
        "--energy",
        "--out",
        path(&eval_out),
    ]);
    assert!(text.contains("top1"), "{text}");
    let energy: serde_json::Value =
        serde_json::from_slice(&fs::read(eval_out.join("energy.json")).unwrap()).unwrap();
    assert!(energy["total_pj"].as_f64().unwrap() > 0.0);

    let prof = ok(&[
        "profile",
        "--checkpoint",
        path(&ckpt),
        "--dataset",
        "synth",
        "--samples",
        "6",
    ]);
    assert!(prof.contains("FLOPs per timestep"), "{prof}");
    let inspected = ok(&["inspect", "--checkpoint", path(&ckpt)]);
    assert!(inspected.contains("T = 2"), "{inspected}");
}

#[test]
fn written_event_files_train_like_the_in_memory_generator() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("events");
    ok(&[
        "synth-data",
        "--out",
        path(&data),
        "--per-class",
        "2",
        "--test-per-class",
        "1",
    ]);
    assert_eq!(
        fs::read_to_string(data.join("train/labels.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 12
    );
    let (mem, disk) = (dir.path().join("mem"), dir.path().join("disk"));
    ok(&train_args(path(&mem), &["--epochs", "1", "--deterministic"]));
    let mut args = train_args(path(&disk), &["--epochs", "1", "--deterministic"]);
    let i = args.iter().position(|&a| a == "synth").unwrap();
    args[i] = "events";
    args.extend_from_slice(&["--data-dir", path(&data)]);
    ok(&args);
    assert_eq!(
        fs::read(mem.join("metrics.csv")).unwrap(),
        fs::read(disk.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(mem.join("model.ckpt")).unwrap(),
        fs::read(disk.join("model.ckpt")).unwrap()
    );
}

#[test]
fn resumed_run_continues_the_metrics() {
    let dir = tempdir().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    ok(&train_args(path(&first), &["--epochs", "1", "--deterministic"]));
    ok(&train_args(
        path(&second),
        &["--epochs", "2", "--deterministic", "--resume", path(&first)],
    ));
    let metrics = fs::read_to_string(second.join("metrics.csv")).unwrap();
    let before = fs::read_to_string(first.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(&before), "{metrics}");
    assert_eq!(metrics.lines().count(), 5);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(second.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_completed"], 2);

    // Nothing left to do.
    let third = dir.path().join("third");
    assert_eq!(
        code(&train_args(
            path(&third),
            &["--epochs", "2", "--resume", path(&second)]
        )),
        2
    );
    assert!(!third.exists());
}

#[test]
fn configuration_errors_exit_2_and_are_reported_together() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let res = msvit(&[
        "train",
        "--profile",
        "tiny",
        "--dataset",
        "cifar10",
        "--lr=-1",
        "--out",
        path(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("base_lr"), "{err}");
    assert!(err.contains("3 channels"), "{err}");
    assert!(err.contains("--data-dir"), "{err}");
    assert!(!out.exists());

    assert_eq!(code(&["inspect", "--profile", "no-such-model"]), 2);
    assert_eq!(code(&["inspect"]), 2);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(
        code(&["eval", "--checkpoint", path(&missing), "--dataset", "synth"]),
        2
    );
}

#[test]
fn runtime_errors_exit_3_without_partial_outputs() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            path(&bad),
            "--dataset",
            "synth",
            "--out",
            path(&out),
        ]),
        3
    );
    assert!(!out.exists());

    // An events root without the expected index files.
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(path(&run), &["--epochs", "1"]);
    let i = args.iter().position(|&a| a == "synth").unwrap();
    args[i] = "events";
    args.extend_from_slice(&["--data-dir", path(&empty)]);
    assert_eq!(code(&args), 3);
    assert!(!run.exists());
}

#[test]
fn divergence_exits_4_without_partial_outputs() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let res = msvit(&train_args(
        path(&out),
        &["--epochs", "3", "--lr", "1e300", "--deterministic"],
    ));
    assert_eq!(
        res.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(!out.exists());
}
