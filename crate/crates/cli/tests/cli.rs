use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bi_clstm::checkpoint::Checkpoint;
use bi_clstm::data::{save_cube, HsiCube};
use bi_clstm::model::{BiClstmModel, ModelConfig};
use bi_clstm::train::{init_model, TrainConfig};
use bi_clstm::Tensor;
use serde_json::{json, Value};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bi-clstm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "synth",
            "--classes",
            "3",
            "--size",
            "16x16",
            "--bands",
            "4",
            "--seed",
            seed,
            "--out",
            "cube.hsc",
        ],
    );
}

const QUICK: [&str; 4] = ["--hidden-channels", "2", "--epochs", "1"];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--data", "cube.hsc", "--checkpoint", "model.bck"];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    args
}

#[test]
fn synth_is_deterministic_and_validates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "4");
    synth(b.path(), "4");
    for f in ["cube.hsc", "cube.hsl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let out = bin(
        a.path(),
        &[
            "synth",
            "--classes",
            "1",
            "--size",
            "8x8",
            "--bands",
            "2",
            "--out",
            "x.hsc",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = bin(
        a.path(),
        &[
            "synth",
            "--classes",
            "2",
            "--size",
            "8by8",
            "--bands",
            "2",
            "--out",
            "x.hsc",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "1");
    ok(d, &train_args(&[]));
    let report = read_json(&d.join("model.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["config"]["hidden_channels"], 2);
    let oa = report["runs"][0]["test"]["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));

    ok(d, &["eval", "--checkpoint", "model.bck", "--out", "metrics.json"]);
    let metrics = read_json(&d.join("metrics.json"));
    assert_eq!(metrics["pixels"], "test");
    assert_eq!(metrics["oa"].as_f64().unwrap(), oa);
    let confusion = metrics["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 3);

    ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "model.bck",
            "--out",
            "map.ppm",
            "--raster",
            "map.hsl",
        ],
    );
    let ppm = fs::read(d.join("map.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n# "));
    let text = String::from_utf8_lossy(&ppm);
    assert!(text.contains("\"hidden_channels\":2"));
    assert!(text.contains("\n16 16\n255\n"));
    assert!(ppm.len() > 16 * 16 * 3);
    let (m, n, labels) = bi_clstm::data::decode_labels(&fs::read(d.join("map.hsl")).unwrap()).unwrap();
    assert_eq!((m, n), (16, 16));
    assert!(labels.iter().all(|&l| l <= 3));
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "2");
    ok(d, &train_args(&["--lr", "0", "--seed", "11", "--augment", "on"]));
    let ck = Checkpoint::load(&d.join("model.bck")).unwrap();
    let config = ModelConfig {
        hidden_channels: 2,
        ..ModelConfig::new(4, 3)
    };
    let cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let init = init_model(config, &cfg).unwrap();
    assert_eq!(ck.model.tensors(), init.tensors());
    assert!(ck.norm.is_some());
    assert!(ck.optimizer.unwrap().step > 0);
}

/// One-band cube: class 1 on the left with value -1, class 2 on the right
/// with +1, and an unlabeled zero band between them wide enough that no
/// patch sees both classes.
fn separable_cube() -> HsiCube {
    let (m, n) = (16, 16);
    let mut values = vec![0.0; m * n];
    let mut labels = vec![0u16; m * n];
    for i in 0..m {
        for j in 0..n {
            if j < 4 {
                values[i * n + j] = -1.0;
                labels[i * n + j] = 1;
            } else if j >= 12 {
                values[i * n + j] = 1.0;
                labels[i * n + j] = 2;
            }
        }
    }
    HsiCube::new(Tensor::from_vec(&[1, m, n], values).unwrap(), labels).unwrap()
}

/// A hand-set model whose logit gap is the sum of all pooled hidden states.
fn sign_model() -> BiClstmModel {
    let config = ModelConfig {
        hidden_channels: 1,
        kernel_size: 1,
        ..ModelConfig::new(1, 2)
    };
    let mut model = BiClstmModel::zeros(config.clone()).unwrap();
    let p = model.forward_params_mut();
    p.w_xc.fill(3.0);
    p.b_i.fill(10.0);
    p.b_o.fill(10.0);
    let p = p.clone();
    *model.backward_params_mut() = p;
    let k = config.feature_len();
    let head = model.head_mut();
    for c in 0..k {
        head.weights.set(&[0, c], -1.0);
        head.weights.set(&[1, c], 1.0);
    }
    model
}

#[test]
fn perfect_model_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_cube(&separable_cube(), &d.join("sep.hsc")).unwrap();
    Checkpoint {
        model: sign_model(),
        norm: None,
        optimizer: None,
        meta: json!({ "config": { "data": "sep.hsc", "hidden_channels": 1, "kernel_size": 1 } }),
    }
    .save(&d.join("sign.bck"))
    .unwrap();
    ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "sign.bck",
            "--pixels",
            "labeled",
            "--out",
            "m.json",
        ],
    );
    let m = read_json(&d.join("m.json"));
    assert_eq!(m["oa"], 1.0);
    assert_eq!(m["aa"], 1.0);
    assert_eq!(m["kappa"], 1.0);
    assert_eq!(m["confusion"], json!([[64, 0], [0, 64]]));
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gradcheck", "--report", "g.json"]);
    let report = read_json(&d.join("g.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["blocks"].as_array().unwrap().len(), 27);
    let out = bin(d, &["gradcheck", "--patch-size", "6"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_and_argument_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin(d, &["eval", "--checkpoint", "missing.bck"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.join("junk.bck"), b"not a checkpoint").unwrap();
    assert_eq!(bin(d, &["eval", "--checkpoint", "junk.bck"]).status.code(), Some(1));
    synth(d, "3");
    assert_eq!(bin(d, &train_args(&["--patch-size", "12"])).status.code(), Some(2));
    assert_eq!(bin(d, &train_args(&["--train-fraction", "1.0"])).status.code(), Some(2));
    assert_eq!(bin(d, &["train", "--data", "cube.hsc"]).status.code(), Some(2));
    assert_eq!(bin(d, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_merges_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "5");
    fs::write(
        d.join("run.json"),
        r#"{"data": "cube.hsc", "checkpoint": "model.bck", "epochs": 1, "hidden_channels": 3, "batch_size": 8}"#,
    )
    .unwrap();
    ok(d, &["train", "--config", "run.json", "--hidden-channels", "2"]);
    let config = &read_json(&d.join("model.json"))["config"];
    assert_eq!(config["hidden_channels"], 2);
    assert_eq!(config["batch_size"], 8);
    assert_eq!(config["epochs"], 1);
    assert_eq!(config["learning_rate"], 0.001);

    fs::write(d.join("bad.json"), r#"{"data": "cube.hsc", "epoch": 1}"#).unwrap();
    let out = bin(d, &["train", "--config", "bad.json", "--checkpoint", "x.bck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn repeats_write_one_checkpoint_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "6");
    ok(d, &train_args(&["--repeats", "3", "--seed", "20"]));
    let report = read_json(&d.join("model.json"));
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let oas: Vec<f64> = runs.iter().map(|r| r["test"]["oa"].as_f64().unwrap()).collect();
    for (k, r) in runs.iter().enumerate() {
        assert_eq!(r["seed"], 20 + k as u64);
        assert!(d.join(format!("model.run{k}.bck")).exists());
    }
    let mean = oas.iter().sum::<f64>() / 3.0;
    let std = (oas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let s = &report["summary"]["oa"];
    assert!((s["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((s["std"].as_f64().unwrap() - std).abs() < 1e-12);

    ok(d, &["eval", "--checkpoint", "model.run2.bck", "--out", "m2.json"]);
    assert_eq!(read_json(&d.join("m2.json"))["oa"].as_f64().unwrap(), oas[2]);
}

#[test]
fn augmentation_does_not_hurt() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--classes",
            "3",
            "--size",
            "32x32",
            "--bands",
            "6",
            "--seed",
            "3",
            "--separation",
            "2",
            "--out",
            "c.hsc",
        ],
    );
    let mean_oa = |augment: &str| {
        let ck = format!("{augment}.bck");
        ok(
            d,
            &[
                "train",
                "--data",
                "c.hsc",
                "--checkpoint",
                &ck,
                "--hidden-channels",
                "4",
                "--epochs",
                "6",
                "--lr",
                "3e-3",
                "--augment",
                augment,
                "--repeats",
                "2",
            ],
        );
        read_json(&d.join(format!("{augment}.json")))["summary"]["oa"]["mean"]
            .as_f64()
            .unwrap()
    };
    let (off, on) = (mean_oa("off"), mean_oa("on"));
    assert!(on >= off - 0.02, "augmented {on} vs plain {off}");
}
