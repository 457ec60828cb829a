use std::path::Path;
use std::process::{Command, Output};

use coattn::attention::Variant;
use coattn::encoders::ModelConfig;
use serde_json::json;

fn coattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coattn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Micro-scale run config: tiny clips, a handful of optimizer steps.
fn micro_config(dir: &Path) -> String {
    let steps = json!({
        "steps": 4,
        "batch_size": 4,
        "optimizer": {"method": {"kind": "sgd_momentum", "momentum": 0.9}, "learning_rate": 0.01, "weight_decay": 1e-5},
        "eval_every": 2
    });
    let cfg = json!({
        "model": ModelConfig::micro(Variant::Cma),
        "data": {"count": 12, "seed": 3, "duration_units": 4.0, "grid": 4, "min_sources": 1, "max_sources": 2,
                 "event_rate": 3.0, "noise_level": 0.05, "tones": [200.0, 400.0, 700.0]},
        "val_count": 8,
        "train": steps,
        "finetune": {"classes": 4, "train_count": 8, "test_count": 8, "train": steps},
        "localize": {"samples": 2},
        "ablate": {"variants": ["CMA"], "depths": [1, 2], "heads": [2, 4], "train_count": 8, "val_count": 8, "train": steps}
    });
    let path = dir.join("micro.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_prints_max_error() {
    let o = coattn(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let worst: f64 = stdout(&o).trim().parse().expect("one number on stdout");
    assert!(worst < 1e-4);
}

#[test]
fn unknown_flag_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = coattn(&["train-pretext", "--out", out.to_str().unwrap(), "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = coattn(&["gen-data", "--out", out.to_str().unwrap(), "--set", "model.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let o = coattn(&["eval-sync"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_2_and_cleans_up() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("absent.ckpt");
    let o = coattn(&[
        "eval-sync",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("inputs.checkpoint={}", missing.display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn data_train_eval_localize_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let data = dir.path().join("data");
    let o = coattn(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dataset = data.join("dataset.bin");
    assert!(dataset.exists() && data.join("config.json").exists());

    let run = dir.path().join("run");
    let train_set = format!("inputs.train={}", dataset.display());
    let o = coattn(&["train-pretext", "--config", &cfg, "--out", run.to_str().unwrap(), "--set", &train_set]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.ckpt");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 4);
    assert_eq!(report["losses"].as_array().unwrap().len(), 4);

    let ckpt_set = format!("inputs.checkpoint={}", ckpt.display());
    let data_set = format!("inputs.dataset={}", dataset.display());
    let o = coattn(&["eval-sync", "--config", &cfg, "--set", &ckpt_set, "--set", &data_set]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // Deterministic evaluation.
    let again = coattn(&["eval-sync", "--config", &cfg, "--set", &ckpt_set, "--set", &data_set]);
    assert_eq!(stdout(&o), stdout(&again));

    let maps = dir.path().join("maps");
    let o = coattn(&["localize", "--config", &cfg, "--out", maps.to_str().unwrap(), "--set", &ckpt_set]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["sample000_cam.pgm", "sample000_cam.ppm", "sample000_head0.pgm", "sample001_head1.ppm"] {
        assert!(maps.join(name).exists(), "{name} missing");
    }
    // Raw maps live on the 1×1 micro token grid; overlays match the frame.
    let pgm = std::fs::read(maps.join("sample000_cam.pgm")).unwrap();
    assert_eq!(pgm, b"P5\n1 1\n255\n\0");
    let ppm = std::fs::read(maps.join("sample000_cam.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
    assert_eq!(ppm.len(), b"P6\n4 4\n255\n".len() + 4 * 4 * 3);
}

#[test]
fn finetune_from_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let run = dir.path().join("run");
    assert!(coattn(&["train-pretext", "--config", &cfg, "--out", run.to_str().unwrap()]).status.success());
    let ft = dir.path().join("ft");
    let ckpt_set = format!("inputs.checkpoint={}", run.join("model.ckpt").display());
    let o = coattn(&["finetune", "--config", &cfg, "--out", ft.to_str().unwrap(), "--set", &ckpt_set]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("test_acc "));
    assert!(ft.join("model.ckpt").exists());

    // A checkpoint from a different architecture is rejected.
    let other = dir.path().join("other");
    let o = coattn(&[
        "finetune",
        "--config",
        &cfg,
        "--out",
        other.to_str().unwrap(),
        "--set",
        &ckpt_set,
        "--set",
        "model.attention.heads=4",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!other.exists());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("ablate");
    let o = coattn(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["variant", "L", "A", "params", "val_acc", "steps", "seconds"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let params: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    // Depth doubles the stack; head count leaves it unchanged.
    assert_eq!(params[2], 2 * params[0]);
    assert_eq!(params[0], params[1]);
}

#[test]
fn seed_flag_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        assert!(coattn(&["gen-data", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]).status.success());
    }
    let read = |p: &Path| std::fs::read(p.join("dataset.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}
