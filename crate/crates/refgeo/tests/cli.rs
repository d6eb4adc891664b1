//! End-to-end tests of the `refgeo` binary: the quickstart pipeline, the
//! manifest chain, byte-level determinism, and config-error exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_refgeo")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "refgeo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small config that keeps every stage fast.
fn write_test_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 7,
        "task": {
            "vocab_size": 16,
            "trigger_tokens": [3],
            "prompt_len_min": 3,
            "prompt_len_max": 6,
            "train_prompts": 32,
            "val_prompts": 16,
            "test_prompts": 16,
            "seed": 7
        },
        "model": {
            "vocab_size": 16,
            "d_model": 32,
            "n_layers": 2,
            "n_heads": 2,
            "d_mlp": 64,
            "max_seq_len": 16,
            "seed": 7
        },
        "train": { "max_steps": 400, "batch_size": 16, "lr": 2e-3,
                   "target_accuracy": 0.99, "eval_every": 25, "eval_prompts": 32, "seed": 7 },
        "optim": { "lambda_abl": 1.0, "lambda_add": 1.0, "lambda_ret": 1.0,
                   "alpha": 1.0, "add_layer": 1, "lr": 0.01,
                   "batch_size": 8, "grad_accum_steps": 2, "max_steps": 15,
                   "retain_mask_len": 18446744073709551615u64, "seed": 7,
                   "plateau_every": 5, "plateau_reductions_max": 2,
                   "flat_window": 10, "flat_rel_tol": 1e-3,
                   "divergence_patience": 25, "pool_size": 20 },
        "cone": { "n": 2, "samples_per_step": 2 },
        "eval": { "max_new_tokens": 6, "alpha_grid_step": 0.5, "alpha_grid_max": 1.0,
                  "kl_threshold": 0.1, "cone_samples": 8, "selection_prompts": 8 },
        "repind": { "lambda": 75.0, "layer_cutoff": 0.75, "candidates": 2, "epsilon": 0.05 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifest_inputs_verify(path: &Path) {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    for entry in manifest["inputs"].as_array().unwrap() {
        let p = entry["path"].as_str().unwrap();
        let recorded = entry["sha256"].as_str().unwrap();
        let actual = refusal_geometry::artifact::sha256_file(Path::new(p)).unwrap();
        assert_eq!(recorded, actual, "stale input checksum in {}", path.display());
    }
    for entry in manifest["outputs"].as_array().unwrap() {
        let p = entry["path"].as_str().unwrap();
        let recorded = entry["sha256"].as_str().unwrap();
        let actual = refusal_geometry::artifact::sha256_file(Path::new(p)).unwrap();
        assert_eq!(recorded, actual, "stale output checksum in {}", path.display());
    }
}

#[test]
fn quickstart_pipeline_with_manifest_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_test_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();

    run_ok(&["--config", cfg, "--out", o, "gen-data"]);
    run_ok(&["--config", cfg, "--out", o, "train-toy"]);
    let model = out.join("model.json");
    let m = model.to_str().unwrap();
    run_ok(&[
        "--config", cfg, "--out", o, "extract-dim",
        "--model", m, "--data", out.join("train.jsonl").to_str().unwrap(),
    ]);
    let dim = out.join("dim.json");
    run_ok(&[
        "--config", cfg, "--out", o, "gen-targets",
        "--model", m, "--direction", dim.to_str().unwrap(),
        "--data", out.join("train.jsonl").to_str().unwrap(),
        "--data", out.join("val.jsonl").to_str().unwrap(),
        "--data", out.join("test.jsonl").to_str().unwrap(),
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "train-rdo",
        "--model", m,
        "--train", out.join("train-targets.jsonl").to_str().unwrap(),
        "--val", out.join("val-targets.jsonl").to_str().unwrap(),
        "--dim", dim.to_str().unwrap(),
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "evaluate",
        "--model", m,
        "--direction", out.join("rdo.json").to_str().unwrap(),
        "--data", out.join("test-targets.jsonl").to_str().unwrap(),
    ]);

    for artifact in [
        "train.jsonl", "val.jsonl", "test.jsonl", "model.json", "dim.json",
        "train-targets.jsonl", "rdo.json", "eval-report.json",
        "alpha-curve.csv", "cosine-profile.csv",
    ] {
        assert!(out.join(artifact).exists(), "missing artifact {artifact}");
    }
    for manifest in [
        "gen-data-manifest.json", "train-toy-manifest.json", "extract-dim-manifest.json",
        "gen-targets-manifest.json", "train-rdo-manifest.json", "evaluate-manifest.json",
    ] {
        manifest_inputs_verify(&out.join(manifest));
    }

    // The eval report carries the model checksum it was computed against.
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("eval-report.json")).unwrap()).unwrap();
    let model_sum = refusal_geometry::artifact::sha256_file(&model).unwrap();
    assert_eq!(report["model_checksum"].as_str().unwrap(), model_sum);
}

#[test]
fn auxiliary_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_test_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();

    run_ok(&["--config", cfg, "--out", o, "gen-data"]);
    run_ok(&["--config", cfg, "--out", o, "train-toy"]);
    let model = out.join("model.json");
    let m = model.to_str().unwrap();
    run_ok(&[
        "--config", cfg, "--out", o, "extract-dim",
        "--model", m, "--data", out.join("train.jsonl").to_str().unwrap(),
    ]);
    let dim = out.join("dim.json");
    run_ok(&[
        "--config", cfg, "--out", o, "gen-targets",
        "--model", m, "--direction", dim.to_str().unwrap(),
        "--data", out.join("train.jsonl").to_str().unwrap(),
        "--data", out.join("val.jsonl").to_str().unwrap(),
    ]);

    // Cone training plus cone evaluation and cone-driven best-of-n.
    run_ok(&[
        "--config", cfg, "--out", o, "train-cone",
        "--model", m,
        "--train", out.join("train-targets.jsonl").to_str().unwrap(),
        "--val", out.join("val-targets.jsonl").to_str().unwrap(),
        "--dim", dim.to_str().unwrap(),
        "--cone-dim", "2",
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "evaluate",
        "--model", m,
        "--cone", out.join("cone.json").to_str().unwrap(),
        "--data", out.join("val-targets.jsonl").to_str().unwrap(),
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "best-of-n",
        "--model", m,
        "--cone", out.join("cone.json").to_str().unwrap(),
        "--data", out.join("val.jsonl").to_str().unwrap(),
        "--n", "3",
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "verify-independence",
        "--model", m,
        "--direction-a", dim.to_str().unwrap(),
        "--direction-b", dim.to_str().unwrap(),
        "--data", out.join("val.jsonl").to_str().unwrap(),
    ]);
    run_ok(&[
        "--config", cfg, "--out", o, "attack-suffix",
        "--model", m,
        "--direction", dim.to_str().unwrap(),
        "--data", out.join("val.jsonl").to_str().unwrap(),
    ]);
    for artifact in [
        "cone.json", "cone-eval-report.json", "cone-samples.csv",
        "best-of-n.json", "n-vs-asr.csv", "independence-report.json", "attack-report.json",
    ] {
        assert!(out.join(artifact).exists(), "missing artifact {artifact}");
    }

    // Self-vs-self can never be representationally independent.
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("independence-report.json")).unwrap())
            .unwrap();
    assert_eq!(rep["pass"].as_bool(), Some(false));
}

#[test]
fn gen_data_is_byte_deterministic() {
    // Identical seeds and config (including the output directory) must
    // reproduce identical bytes, so rerun the stage in place.
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_test_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = tmp.path().join("out");
    let files = ["train.jsonl", "val.jsonl", "test.jsonl", "gen-data-manifest.json"];

    run_ok(&["--config", cfg, "--out", out.to_str().unwrap(), "gen-data"]);
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    run_ok(&["--config", cfg, "--out", out.to_str().unwrap(), "gen-data"]);
    for (f, a) in files.iter().zip(&first) {
        let b = std::fs::read(out.join(f)).unwrap();
        assert_eq!(a, &b, "{f} not byte-identical across reruns");
    }
}

#[test]
fn missing_direction_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_test_config(tmp.path());
    let out = run(&[
        "--config", cfg_path.to_str().unwrap(),
        "--out", tmp.path().join("out").to_str().unwrap(),
        "evaluate",
        "--model", tmp.path().join("nope-model.json").to_str().unwrap(),
        "--direction", tmp.path().join("nope-dir.json").to_str().unwrap(),
        "--data", tmp.path().join("nope.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "config errors exit with status 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--model"), "stderr must name the field: {stderr}");
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("no-seed.json");
    std::fs::write(&cfg, b"{}").unwrap();
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "--out", tmp.path().join("out").to_str().unwrap(),
        "gen-data",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "stderr must name the missing field: {stderr}");
}

#[test]
fn checksum_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_test_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    // Model A and its direction.
    run_ok(&["--config", cfg, "--out", out_a.to_str().unwrap(), "gen-data"]);
    run_ok(&["--config", cfg, "--out", out_a.to_str().unwrap(), "train-toy"]);
    run_ok(&[
        "--config", cfg, "--out", out_a.to_str().unwrap(), "extract-dim",
        "--model", out_a.join("model.json").to_str().unwrap(),
        "--data", out_a.join("train.jsonl").to_str().unwrap(),
    ]);
    // Model B under a different seed.
    run_ok(&["--config", cfg, "--seed", "8", "--out", out_b.to_str().unwrap(), "gen-data"]);
    run_ok(&["--config", cfg, "--seed", "8", "--out", out_b.to_str().unwrap(), "train-toy"]);

    let out = run(&[
        "--config", cfg, "--out", out_b.to_str().unwrap(), "gen-targets",
        "--model", out_b.join("model.json").to_str().unwrap(),
        "--direction", out_a.join("dim.json").to_str().unwrap(),
        "--data", out_b.join("train.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "checksum mismatch must refuse with status 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checksum"), "stderr: {stderr}");
}
