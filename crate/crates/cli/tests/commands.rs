use std::path::Path;
use std::process::Command;

use kvm_cli::commands::{self, EvalOutput};
use kvm_cli::config::EvalTask;
use kvm_cli::{CliError, Overrides, Preset, RunConfig};
use kvm_core::checks::{CheckLevel, CheckTargets};
use kvm_core::numerics::Tensor;

/// A model small enough for every command to finish in seconds.
const TINY: &str = r#"{
  "precision": "f64",
  "model": {
    "d_model": 16, "n_heads": 2, "n_layers": 2,
    "kvm": { "chunk_len": 8, "n_bswa_chunks": 2, "rotary_width": 2,
             "schedule": { "kind": "power_law", "coefficient": 2.0, "exponent": 0.5 } }
  },
  "train": { "total_steps": 6, "warmup_steps": 2, "batch_size": 2, "seq_len": 40 },
  "eval": {
    "niah": { "context_len": 48, "samples": 3, "depths": [0.1, 0.9] },
    "loss": { "n_docs": 2, "doc_len": 4096, "block": 64 }
  },
  "profile": { "lengths": [8, 16, 40, 100], "decode_tokens": 3 },
  "sim": { "min_log2": 6, "max_log2": 12 }
}"#;

fn tiny(out: &Path, preset: Option<Preset>) -> RunConfig {
    let o = Overrides {
        seed: Some(3),
        out: Some(out.to_path_buf()),
        preset,
    };
    let mut cfg = RunConfig::parse(TINY, "tiny", &o).unwrap();
    // Presets replace the model; shrink it back for speed.
    if preset.is_some() {
        let modes = cfg.model.modes.clone();
        let schedule = cfg.model.kvm.schedule.clone();
        cfg.model = RunConfig::parse(TINY, "tiny", &Overrides::default()).unwrap().model;
        cfg.model.modes = modes;
        cfg.model.kvm.schedule = schedule;
    }
    cfg
}

fn kvm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvm"))
}

#[test]
fn training_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Some(Preset::KvmFixed));
    let summary = commands::train(&cfg).unwrap();
    assert_eq!(summary.steps, 6);
    assert!(summary.final_loss.is_finite());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,lr,loss,tokens"));
    assert_eq!(lines.count(), 6);
    assert!(dir.path().join("checkpoint.kvmc").exists());
    assert!(dir.path().join("timing.csv").exists());
    let resolved: RunConfig = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn same_seed_gives_identical_metrics_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    commands::train(&tiny(a.path(), None)).unwrap();
    commands::train(&tiny(b.path(), None)).unwrap();
    for f in ["metrics.csv", "checkpoint.kvmc"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_writes_niah_and_loss_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), None);
    commands::train(&cfg).unwrap();
    match commands::eval(&cfg).unwrap() {
        EvalOutput::Niah(rows) => {
            // two distractor kinds by two depths
            assert_eq!(rows.len(), 4);
            assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(dir.path().join("niah.csv").exists());
    cfg.eval.task = EvalTask::LossByPosition;
    match commands::eval(&cfg).unwrap() {
        EvalOutput::LossByPosition(blocks) => assert_eq!(blocks.len(), 64),
        other => panic!("unexpected {other:?}"),
    }
    let table = std::fs::read_to_string(dir.path().join("loss_by_position.csv")).unwrap();
    assert_eq!(table.lines().count(), 65);
}

#[test]
fn eval_rejects_a_checkpoint_of_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), None);
    commands::train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.d_model = 24;
    let err = commands::eval(&other).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(err.to_string().contains("d_model"), "{err}");
}

#[test]
fn profile_rows_match_the_simulator() {
    let dir = tempfile::tempdir().unwrap();
    for preset in [Preset::KvmSqrt, Preset::KvmFixed, Preset::Hybrid] {
        let rows = commands::profile(&tiny(dir.path(), Some(preset))).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.state_rows, r.simulated_rows, "{preset:?} T={}", r.seq_len);
        }
    }
}

#[test]
fn schedule_sim_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let fits = commands::schedule_sim(&tiny(dir.path(), None)).unwrap();
    assert_eq!(fits.len(), 3);
    let sim = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert_eq!(sim.lines().next(), Some("schedule,n,state_rows,prefill_cost,decode_cost"));
    assert_eq!(sim.lines().count(), 1 + 3 * 7);
}

fn off_by_one_mask(start: usize, end: usize, rows: usize, window_start: usize) -> Tensor<f64> {
    // Lets every query see one position past itself.
    let mut m = kvm_core::kvm::build_mask::<f64>(start, end, rows, window_start);
    let width = rows + end - window_start;
    let data = m.data_mut();
    for (i, u) in (start..end).enumerate() {
        let col = rows + u + 1 - window_start;
        if col < width {
            data[i * width + col] = 0.0;
        }
    }
    m
}

#[test]
fn injected_mask_bug_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), None);
    cfg.check.level = CheckLevel::Fast;
    let targets = CheckTargets { mask: off_by_one_mask };
    match commands::check_with(&cfg, &targets) {
        Err(CliError::CheckFailed(names)) => assert!(names.contains("build_mask"), "{names}"),
        other => panic!("expected a failed check, got {other:?}"),
    }
    let csv = std::fs::read_to_string(dir.path().join("check.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("build_mask,") && l.contains(",false,")), "{csv}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "train": { "batch_sise": 4 } }"#).unwrap();
    let out = kvm().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_sise"));

    let good = dir.path().join("tiny.json");
    std::fs::write(&good, TINY).unwrap();
    let out = kvm()
        .args(["schedule-sim", "--seed", "1", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("sim"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = kvm()
        .args(["eval", "--config"])
        .arg(&good)
        .arg("--checkpoint")
        .arg(dir.path().join("nope.kvmc"))
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn check_failure_maps_to_exit_one() {
    assert_eq!(CliError::CheckFailed("build_mask".into()).exit_code(), 1);
    assert_eq!(CliError::Config("x".into()).exit_code(), 2);
}
