//! End-to-end checks of the `mars` binary: config round-trips, the
//! train/eval/prune/report pipeline on the bundled toy experiment, exit
//! codes, and metric-log determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mars_core::checkpoint::Checkpoint;
use mars_core::config;
use mars_core::rng::Rng;
use mars_core::trainer::Trainer;

fn mars_bin() -> &'static str {
    env!("CARGO_BIN_EXE_mars")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mars-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(mars_bin())
        .args(args)
        .output()
        .expect("failed to spawn mars")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

const BUNDLED: &[&str] = &[
    "../cli/configs/mnist-2fc-soft.cfg",
    "../cli/configs/mnist-2fc-hard.cfg",
    "../cli/configs/lenet5-tucker.cfg",
    "../cli/configs/toy-lowrank.cfg",
];

#[test]
fn bundled_configs_roundtrip_unchanged() {
    for rel in BUNDLED {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(rel);
        let text = fs::read_to_string(&path).unwrap();
        let parsed = config::parse(&text).unwrap_or_else(|e| panic!("{rel}: {e}"));
        assert_eq!(config::serialize(&parsed), text, "{rel} is not canonical");
    }
}

#[test]
fn bundled_experiment_settings_are_pinned() {
    let soft = config::parse(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/mnist-2fc-soft.cfg"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(soft.train.alpha, -1.5);
    assert_eq!(soft.train.pi, 0.1);

    let hard = config::parse(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/mnist-2fc-hard.cfg"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(hard.train.alpha, -1.75);
    assert_eq!(hard.train.pi, 0.01);

    let lenet = config::parse(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/lenet5-tucker.cfg"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(lenet.train.alpha, 0.0);
    assert_eq!(lenet.train.pi, 0.01);
    assert_eq!(lenet.train.epochs, 20);
}

#[test]
fn toy_pipeline_train_eval_prune_report() {
    let dir = scratch("pipeline");
    let out = dir.join("run");

    let train = run(&[
        "train",
        "--config",
        "toy-lowrank",
        "--out-dir",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(out.join("metrics.log").exists());

    let eval = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--quiet"]);
    assert!(eval.status.success());
    let acc: f64 = stdout(&eval).trim().parse().unwrap();
    assert!(acc >= 0.9, "toy accuracy {acc}");

    let prune = run(&[
        "prune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(
        prune.status.success(),
        "prune failed: {}",
        String::from_utf8_lossy(&prune.stderr)
    );
    let pruned = out.join("pruned.ckpt");
    assert!(pruned.exists());
    assert!(out.join("prune_report.txt").exists());

    // Pruned accuracy equals hard-masked accuracy exactly.
    let eval_pruned = run(&["eval", "--checkpoint", pruned.to_str().unwrap(), "--quiet"]);
    assert!(eval_pruned.status.success());
    let acc_pruned: f64 = stdout(&eval_pruned).trim().parse().unwrap();
    assert_eq!(acc, acc_pruned);

    let report = run(&[
        "report",
        "--before",
        ckpt.to_str().unwrap(),
        "--after",
        pruned.to_str().unwrap(),
    ]);
    assert!(report.status.success());
    let text = stdout(&report);
    assert!(text.contains("compression"), "{text}");
    assert!(text.contains("accuracy"), "{text}");
    assert!(text.contains("before") && text.contains("after"), "{text}");
}

#[test]
fn same_seed_produces_byte_identical_metrics() {
    let dir = scratch("determinism");
    for name in ["a", "b"] {
        let out = dir.join(name);
        let result = run(&[
            "train",
            "--config",
            "toy-lowrank",
            "--seed",
            "77",
            "--out-dir",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert!(result.status.success());
    }
    let log_a = fs::read(dir.join("a/metrics.log")).unwrap();
    let log_b = fs::read(dir.join("b/metrics.log")).unwrap();
    assert_eq!(log_a, log_b);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    // Unknown config name: configuration error (2).
    let out = run(&["train", "--config", "no-such-config"]);
    assert_eq!(out.status.code(), Some(2));

    // Syntactically broken config file: configuration error (2).
    let dir = scratch("exitcodes");
    let bad = dir.join("bad.cfg");
    fs::write(&bad, "[dataset]\nkind = mnist\nmystery = 1\n").unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Missing checkpoint: data error (3).
    let out = run(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(out.status.code(), Some(3));

    // Dataset directory without MNIST files: data error (3).
    let empty = dir.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let cfg_text = fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/mnist-2fc-soft.cfg"),
    )
    .unwrap()
    .replace("dir = data/mnist", &format!("dir = {}", empty.display()));
    let cfg_path = dir.join("missing-data.cfg");
    fs::write(&cfg_path, cfg_text).unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

fn mnist_dir() -> Option<PathBuf> {
    let candidate = match std::env::var("MARS_MNIST_DIR") {
        Ok(dir) => PathBuf::from(dir),
        Err(_) => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    candidate
        .join("t10k-images-idx3-ubyte")
        .exists()
        .then_some(candidate)
}

#[test]
fn untrained_model_scores_at_chance_on_mnist() {
    let Some(data) = mnist_dir() else {
        eprintln!("skipping: MNIST not found (set MARS_MNIST_DIR)");
        return;
    };
    // Build an untrained checkpoint for the bundled soft config.
    let text = fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/mnist-2fc-soft.cfg"),
    )
    .unwrap();
    let cfg = config::parse(&text).unwrap();
    let mut rng = Rng::from_seed(cfg.train.seed);
    let model = config::build_model(&cfg.model, &cfg.train, &mut rng).unwrap();
    let trainer = Trainer::new(model, cfg.train.clone(), 60_000).unwrap();
    let dir = scratch("chance");
    let ckpt = dir.join("untrained.ckpt");
    Checkpoint::capture(&trainer, text).save(&ckpt).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let acc: f64 = stdout(&out).trim().parse().unwrap();
    assert!(
        (acc - 0.10).abs() <= 0.02,
        "untrained accuracy {acc} not at chance"
    );
}
