use std::path::Path;
use std::process::{Command, Output};

use hypirb_core::harness::Checkpoint;

fn hypirb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypirb")).args(args).env_remove("HYPIRB_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn write_config(dir: &Path, train: serde_json::Value) -> String {
    let cfg = serde_json::json!({
        "name": "tiny",
        "out_dir": "run",
        "data": {
            "spec": {"kind": "gmm", "gmm": {"means": [[2.0, 0.0], [-2.0, 0.0]], "var": 0.01, "weights": [0.5, 0.5]}},
            "n_train": 64, "n_eval": 32, "seed": 0
        },
        "degradation": {"operator": {"kind": "linear", "dim": 2, "matrix": [0.5, 0.0, 0.0, 0.5]}, "noise": 0.1},
        "models": {
            "generator": {"kind": "mlp_denoiser", "data_dim": 2, "hidden": [16, 16], "time_dim": 8, "cond_dim": 0},
            "critic": {"kind": "mlp_critic", "data_dim": 2, "hidden": [16]}
        },
        "pretrain": {"dsm": {"steps": 20, "batch": 16}},
        "assets": {"diffusion": "run/diffusion.ckpt"},
        "train": train
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn predict_steps_with_reference_constants() {
    let o = hypirb(&["theory", "predict-steps", "--L", "300", "--mu", "0.06", "--eps0", "5e-3", "--dtar", "1e-5", "--c2", "2"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).parse().unwrap();
    assert!((7.9e3..=8.2e3).contains(&v), "{v}");
}

#[test]
fn lemma_bound_and_bad_constants() {
    let o = hypirb(&["theory", "lemma-bound", "--lj", "2", "--eps0", "0.5"]);
    let v: f64 = stdout(&o).parse().unwrap();
    assert!((v - std::f64::consts::SQRT_2).abs() < 1e-15);
    let o = hypirb(&["theory", "predict-steps", "--L", "300", "--mu", "-1", "--eps0", "5e-3", "--dtar", "1e-5", "--c2", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"kind": "gmm", "gmm": {"means": [[1.0, 1.0], [-1.0, -1.0]], "var": 0.1, "weights": [0.3, 0.7]}}"#).unwrap();
    let mut files = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let o = hypirb(&["data", "gen", "--spec", spec.to_str().unwrap(), "--n", "50", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn invalid_config_exits_2_with_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"lr_g": -1.0, "batch": 0}));
    let o = hypirb(&["finetune", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.lr_g") && err.contains("train.batch"), "{err}");
    assert!(!dir.path().join("run").exists(), "no compute before validation");

    let cfg = write_config(dir.path(), serde_json::json!({"stepz": 3}));
    let o = hypirb(&["finetune", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn zero_step_finetune_keeps_the_pretrained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"steps": 0, "lora_rank": 4}));
    let o = hypirb(&["pretrain", "diffusion", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = hypirb(&["finetune", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let asset = Checkpoint::load(&dir.path().join("run/diffusion.ckpt")).unwrap();
    let run = Checkpoint::load(&dir.path().join("run/final.ckpt")).unwrap();
    let run_hashes: std::collections::HashMap<_, _> = run.manifest().into_iter().map(|e| (e.name, e.sha256)).collect();
    for e in asset.manifest() {
        assert_eq!(run_hashes[&format!("gen.base.{}", e.name)], e.sha256, "{}", e.name);
    }
}

#[test]
fn finetune_eval_restore_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"init_mode": "scratch", "steps": 8, "eval_every": 4, "batch": 16, "lora_rank": 4}));
    let o = Command::new(env!("CARGO_BIN_EXE_hypirb")).args(["finetune", "--config", &cfg]).env("HYPIRB_SEED", "42").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = stdout(&o);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["seed"], 42);

    let o = hypirb(&["eval", "--checkpoint", &ckpt, "--metrics", "w2,tv,modes"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["step"], 8);
    assert!(v["w2"].as_f64().unwrap() > 0.0 && v["tv"].is_number() && v["mode_mass_gap"].is_number());

    let input = dir.path().join("y.json");
    std::fs::write(&input, r#"{"shape": [3, 2], "data": [1.0, 0.0, -1.0, 0.0, 0.5, 0.5]}"#).unwrap();
    let mut outs = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("x{seed}.json"));
        let o = hypirb(&["restore", "--checkpoint", &ckpt, "--input", input.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outs[0], outs[1], "rho = 0 ignores the seed");

    let csv = dir.path().join("report.csv");
    let o = hypirb(&["report", "--runs", dir.path().to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[1].starts_with("run,scratch,42,"), "{text}");
    assert!(lines[2].starts_with("median,scratch,,"), "{text}");
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"init_mode": "scratch", "steps": 1}));
    std::fs::create_dir_all(dir.path().join("run")).unwrap();
    std::fs::write(dir.path().join("run/run.lock"), "123").unwrap();
    let o = hypirb(&["finetune", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let o = hypirb(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}
