//! End-to-end tests of the `hrt` binary: exit codes, artifact layout,
//! determinism, and the dump-attention counting/stochasticity contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hrt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hrt"))
}

fn run(args: &[&str]) -> Output {
    hrt().args(args).output().expect("spawn hrt")
}

fn write_micro_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "vocab_size": 12, "max_len": 16, "levels": 2, "dims": [8, 16],
            "heads": 2, "blocks_per_level": 1, "reduction": "wavelet",
            "cross_resolution": true, "shared_scale_modules": false,
            "readout": "coarsest", "lambda_recon": 0.1, "dropout": 0.0,
            "seed": 3, "attn_chunk": 0
        },
        "task": {
            "kind": "copy", "vocab_size": 12, "seq_len": 8, "batch_size": 4,
            "listops_depth": 3, "mask_fraction": 0.15, "block_size": 5,
            "num_blocks": 4
        },
        "training": {
            "steps": 5, "peak_lr": 0.001, "warmup_steps": 2, "eval_every": 5,
            "patience": 5, "eval_batches": 2, "seed": 3
        }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_exits_1_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/cfg.json"), "stderr: {stderr}");
}

#[test]
fn unknown_override_key_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(tmp.path());
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--override",
        "training.stepz=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn zero_step_train_checkpoint_equals_init() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(tmp.path());
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "training.steps=0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // A freshly initialized model saved directly must match byte for byte.
    let raw: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let model_cfg: hrt_core::config::HrtConfig =
        serde_json::from_value(raw["model"].clone()).unwrap();
    let model = hrt_core::model::HrtModel::init(&model_cfg).unwrap();
    let ref_path = tmp.path().join("init.hrt");
    hrt_core::checkpoint::save(&model, &ref_path).unwrap();
    assert_eq!(
        fs::read(out_dir.join("checkpoint.hrt")).unwrap(),
        fs::read(&ref_path).unwrap()
    );
}

#[test]
fn train_reruns_are_byte_identical_and_match_golden_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(tmp.path());
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        artifacts.push((
            fs::read(out_dir.join("checkpoint.hrt")).unwrap(),
            fs::read(out_dir.join("train_report.csv")).unwrap(),
            fs::read(out_dir.join("run.json")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);

    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("a/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["steps_run"], 5);
    let final_loss = summary["final_train_loss"].as_f64().unwrap();
    // Golden value for this pinned config+seed.
    assert!(
        (final_loss - 4.849807154949052).abs() < 1e-9,
        "final_train_loss = {final_loss:.15}"
    );
}

#[test]
fn eval_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(tmp.path());
    let train_dir = tmp.path().join("t");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
        "--override",
        "training.steps=0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let ckpt = train_dir.join("checkpoint.hrt");
    let mut metrics = Vec::new();
    for name in ["e1", "e2"] {
        let out_dir = tmp.path().join(name);
        let out = run(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--split",
            "val",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        metrics.push(fs::read(out_dir.join("metrics.json")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn eval_rejects_mismatched_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(tmp.path());
    let train_dir = tmp.path().join("t");
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
        "--override",
        "training.steps=0",
    ]);
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoint.hrt").to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
        "--override",
        "model.heads=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads"));
}

#[test]
fn bench_emits_four_scaling_rows_and_passes_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("bench");
    let out = run(&[
        "bench",
        "--out",
        out_dir.to_str().unwrap(),
        "--n-list",
        "256,512",
        "--measure-max",
        "512",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "header + 2 n x 2 models");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert!(summary["crossover_n"].as_u64().unwrap() <= 512);
    // run.json lists every artifact with a hash.
    let run_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert!(run_json["artifacts"]["scaling.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn dump_attention_counts_stochasticity_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    // L=3, h=2 model: 3*2 self maps + 2*2 cross maps = 10 attention CSVs.
    let cfg = serde_json::json!({
        "model": {
            "vocab_size": 12, "max_len": 16, "levels": 3, "dims": [8, 8, 16],
            "heads": 2, "blocks_per_level": 1, "reduction": "wavelet",
            "cross_resolution": true, "shared_scale_modules": false,
            "readout": "coarsest", "lambda_recon": 0.1, "dropout": 0.0,
            "seed": 7, "attn_chunk": 0
        },
        "task": {
            "kind": "copy", "vocab_size": 12, "seq_len": 12, "batch_size": 1,
            "listops_depth": 3, "mask_fraction": 0.15, "block_size": 5,
            "num_blocks": 4
        },
        "training": { "steps": 0, "peak_lr": 0.001, "warmup_steps": 1,
            "eval_every": 5, "patience": 5, "eval_batches": 1, "seed": 7 }
    });
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let train_dir = tmp.path().join("t");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut dumps = Vec::new();
    for name in ["d1", "d2"] {
        let out_dir = tmp.path().join(name);
        let out = run(&[
            "dump-attention",
            "--config",
            cfg_path.to_str().unwrap(),
            "--checkpoint",
            train_dir.join("checkpoint.hrt").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        dumps.push(out_dir);
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dumps[0].join("manifest.json")).unwrap())
            .unwrap();
    let self_maps = manifest["self_maps"].as_array().unwrap();
    let cross_maps = manifest["cross_maps"].as_array().unwrap();
    assert_eq!(self_maps.len(), 6);
    assert_eq!(cross_maps.len(), 4);

    // Every attention row sums to 1 +/- 1e-6, and reruns are byte-identical.
    for file in self_maps.iter().chain(cross_maps) {
        let name = file.as_str().unwrap();
        let a = fs::read_to_string(dumps[0].join(name)).unwrap();
        let b = fs::read_to_string(dumps[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
        for (i, line) in a.lines().enumerate() {
            let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{name} row {i} sums to {sum}");
        }
    }
}

#[test]
fn untrained_listops_accuracy_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "model": {
            "vocab_size": 17, "max_len": 64, "levels": 2, "dims": [8, 16],
            "heads": 2, "blocks_per_level": 1, "reduction": "wavelet",
            "cross_resolution": true, "shared_scale_modules": false,
            "readout": "coarsest", "lambda_recon": 0.0, "dropout": 0.0,
            "seed": 11, "attn_chunk": 0
        },
        "task": {
            "kind": "listops_mini", "vocab_size": 17, "seq_len": 64,
            "batch_size": 8, "listops_depth": 3, "mask_fraction": 0.15,
            "block_size": 5, "num_blocks": 4
        },
        "training": { "steps": 0, "peak_lr": 0.001, "warmup_steps": 1,
            "eval_every": 5, "patience": 5, "eval_batches": 1, "seed": 11 }
    });
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let train_dir = tmp.path().join("t");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = tmp.path().join("e");
    let out = run(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoint.hrt").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--batches",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!(
        (acc - 0.1).abs() <= 0.03,
        "untrained 10-class accuracy {acc} not near chance"
    );
}
