//! The subcommands. Each writes its CSV files into the configured output
//! directory and returns the same numbers for programmatic use.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvm_core::backbone::{AttentionMode, Checkpoint, GptAlpha, Session};
use kvm_core::checks::{run_checks, CheckRow, CheckTargets};
use kvm_core::data::{
    byte_tokenize, eval_loss_by_position, eval_niah, gen_corpus, gen_niah, load_corpus, BlockLoss, CorpusSampler, CorpusSpec,
    DistractorKind, GeneratedSource,
};
use kvm_core::sim::{fit_top_decade, loglog_slope, pow2_range, simulate, SimPoint};
use kvm_core::training::{BatchSource, MetricsLog, Trainer};
use kvm_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EvalTask, Precision, RunConfig};
use crate::{CliError, CliResult};

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out)?;
    cfg.write_resolved()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct TimingRow {
    step: usize,
    wall_ms: u64,
}

fn training_source(cfg: &RunConfig) -> CliResult<Box<dyn BatchSource>> {
    match &cfg.data.corpus {
        Some(path) => {
            let docs = load_corpus(path)?.iter().map(|d| byte_tokenize(&d.bytes)).collect();
            Ok(Box::new(CorpusSampler::new(docs, cfg.seed)))
        }
        None => {
            let mixture: Vec<_> = cfg.data.mixture.iter().map(|m| (m.kind, m.weight)).collect();
            Ok(Box::new(GeneratedSource::new(cfg.seed, &mixture)?))
        }
    }
}

/// Trains from scratch. Writes `config.json`, `metrics.csv`
/// (`step,lr,loss,tokens`), `timing.csv` (`step,wall_ms`) and
/// `checkpoint.kvmc`, plus `checkpoint-<step>.kvmc` when periodic
/// checkpoints are on.
pub fn train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> CliResult<TrainSummary> {
    prepare_out(cfg)?;
    let source = training_source(cfg)?;
    let model = GptAlpha::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let metrics_path = cfg.out.join("metrics.csv");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut metrics = MetricsLog::open(&metrics_path)?;
    let mut timing = csv::Writer::from_path(cfg.out.join("timing.csv"))?;
    let mut final_loss = f64::NAN;
    let first = trainer.step;
    while trainer.step < cfg.train.total_steps {
        let Some(batch) = source.batch(trainer.step, cfg.train.batch_size, cfg.train.seq_len) else {
            break;
        };
        let m = trainer.train_step(&batch)?;
        metrics.write(&m)?;
        timing.serialize(TimingRow {
            step: m.step,
            wall_ms: m.wall_ms,
        })?;
        final_loss = m.loss;
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(cfg.out.join(format!("checkpoint-{}.kvmc", m.step)))?;
        }
    }
    timing.flush()?;
    let checkpoint = cfg.out.join("checkpoint.kvmc");
    trainer.checkpoint().save(&checkpoint)?;
    let steps = trainer.step - first;
    eprintln!("trained {steps} steps, final loss {final_loss:.4}, checkpoint {}", checkpoint.display());
    Ok(TrainSummary {
        steps,
        final_loss,
        checkpoint,
    })
}

/// Loads a checkpoint and insists its model matches the configuration.
pub fn load_model<T: Scalar>(cfg: &RunConfig) -> CliResult<GptAlpha<T>> {
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::<T>::load(&path).map_err(|e| match e {
        kvm_core::Error::Io(io) => CliError::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => CliError::Core(other),
    })?;
    let saved = ck.model_config()?;
    if saved != cfg.model {
        let a = serde_json::to_value(&saved).expect("config serializes");
        let b = serde_json::to_value(&cfg.model).expect("config serializes");
        let fields: Vec<String> = a
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| b.get(k.as_str()) != Some(*v))
            .map(|(k, _)| format!("model.{k}"))
            .collect();
        return Err(CliError::Config(format!(
            "checkpoint {} does not match the configured model (differs in {})",
            path.display(),
            fields.join(", ")
        )));
    }
    Ok(ck.model()?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NiahRow {
    pub distractor: DistractorKind,
    pub depth: f64,
    pub context_len: usize,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct NiahSampleRow {
    distractor: DistractorKind,
    depth: f64,
    sample: usize,
    needle_offset: usize,
    answer: String,
    output: String,
    hit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalOutput {
    Niah(Vec<NiahRow>),
    LossByPosition(Vec<BlockLoss>),
}

/// Seed of NIAH sample `i`; shared across depths and distractor kinds so
/// that those are the only differences.
pub fn niah_seed(run_seed: u64, i: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Evaluation documents come from a stream disjoint from training data.
pub fn eval_corpus_seed(run_seed: u64) -> u64 {
    run_seed ^ 0x5eed_e7a1
}

/// `niah`: writes `niah.csv` (`distractor,depth,context_len,samples,accuracy`)
/// and `niah_samples.csv`. `loss-by-position`: writes
/// `loss_by_position.csv` (`block_start,mean_loss`).
pub fn eval(cfg: &RunConfig) -> CliResult<EvalOutput> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg),
        Precision::F64 => eval_as::<f64>(cfg),
    }
}

fn eval_as<T: Scalar>(cfg: &RunConfig) -> CliResult<EvalOutput> {
    let model = load_model::<T>(cfg)?;
    prepare_out(cfg)?;
    match cfg.eval.task {
        EvalTask::Niah => {
            let n = &cfg.eval.niah;
            let (mut rows, mut detail) = (Vec::new(), Vec::new());
            for &distractor in &n.distractors {
                for &depth in &n.depths {
                    let samples = (0..n.samples)
                        .map(|i| gen_niah(niah_seed(cfg.seed, i), n.context_len, depth, distractor))
                        .collect::<kvm_core::Result<Vec<_>>>()?;
                    let r = eval_niah(&model, &samples)?;
                    for (i, (s, out)) in samples.iter().zip(&r.outputs).enumerate() {
                        detail.push(NiahSampleRow {
                            distractor,
                            depth,
                            sample: i,
                            needle_offset: s.needle_offset,
                            answer: String::from_utf8_lossy(&s.value).into_owned(),
                            output: out.iter().map(|&t| char::from(t.min(255) as u8)).collect(),
                            hit: r.hits[i],
                        });
                    }
                    eprintln!("niah {distractor:?} depth {depth}: accuracy {:.3}", r.accuracy);
                    rows.push(NiahRow {
                        distractor,
                        depth,
                        context_len: n.context_len,
                        samples: n.samples,
                        accuracy: r.accuracy,
                    });
                }
            }
            write_csv(&cfg.out.join("niah.csv"), &rows)?;
            write_csv(&cfg.out.join("niah_samples.csv"), &detail)?;
            Ok(EvalOutput::Niah(rows))
        }
        EvalTask::LossByPosition => {
            let l = &cfg.eval.loss;
            let spec = CorpusSpec {
                n_docs: l.n_docs,
                min_len: l.doc_len,
                max_len: l.doc_len,
                kind: l.kind,
            };
            let docs: Vec<Vec<usize>> = gen_corpus(eval_corpus_seed(cfg.seed), &spec)?.iter().map(|d| d.tokens()).collect();
            let blocks = eval_loss_by_position(&model, &docs, l.block)?;
            write_csv(&cfg.out.join("loss_by_position.csv"), &blocks)?;
            Ok(EvalOutput::LossByPosition(blocks))
        }
    }
}

/// Writes `check.csv` (`check,cases,max_abs,tolerance,pass,detail`); fails
/// when any row fails.
pub fn check(cfg: &RunConfig) -> CliResult<Vec<CheckRow>> {
    check_with(cfg, &CheckTargets::default())
}

pub fn check_with(cfg: &RunConfig, targets: &CheckTargets) -> CliResult<Vec<CheckRow>> {
    prepare_out(cfg)?;
    let start = Instant::now();
    let rows = run_checks(cfg.check.level, targets)?;
    for r in &rows {
        println!("{r}");
    }
    write_csv(&cfg.out.join("check.csv"), &rows)?;
    eprintln!("checks finished in {:.1}s", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SimRow<'a> {
    schedule: &'a str,
    n: usize,
    state_rows: usize,
    prefill_cost: f64,
    decode_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimFitRow {
    pub schedule: String,
    pub state_slope: f64,
    pub prefill_slope: f64,
    pub decode_slope: f64,
}

/// Writes `sim.csv` (`schedule,n,state_rows,prefill_cost,decode_cost`) and
/// `sim_fit.csv` (`schedule,state_slope,prefill_slope,decode_slope`), the
/// slopes fitted over the top decade of lengths.
pub fn schedule_sim(cfg: &RunConfig) -> CliResult<Vec<SimFitRow>> {
    prepare_out(cfg)?;
    let lengths = pow2_range(cfg.sim.min_log2, cfg.sim.max_log2);
    let mut fits = Vec::new();
    let mut w = csv::Writer::from_path(cfg.out.join("sim.csv"))?;
    for schedule in &cfg.sim.schedules {
        let kvm = kvm_core::kvm::KvmConfig {
            schedule: schedule.clone(),
            ..cfg.model.kvm.clone()
        };
        let label = schedule.label();
        let points: Vec<SimPoint> = lengths.iter().map(|&n| simulate(&kvm, n)).collect();
        for p in &points {
            w.serialize(SimRow {
                schedule: &label,
                n: p.n,
                state_rows: p.state_rows,
                prefill_cost: p.prefill_cost,
                decode_cost: p.decode_cost,
            })?;
        }
        let fit = fit_top_decade(&points)?;
        println!(
            "{label}: state slope {:.3}, prefill slope {:.3}, decode slope {:.3}",
            fit.state_slope, fit.prefill_slope, fit.decode_slope
        );
        fits.push(SimFitRow {
            schedule: label,
            state_slope: fit.state_slope,
            prefill_slope: fit.prefill_slope,
            decode_slope: fit.decode_slope,
        });
    }
    w.flush()?;
    write_csv(&cfg.out.join("sim_fit.csv"), &fits)?;
    Ok(fits)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub seq_len: usize,
    pub prefill_ms: f64,
    pub decode_us_per_token: f64,
    /// Largest state over KVM layers after the prefill; 0 without KVM layers.
    pub state_rows: usize,
    pub simulated_rows: usize,
}

/// Writes `profile.csv` (`seq_len,prefill_ms,decode_us_per_token,
/// state_rows,simulated_rows`) for a freshly initialized model.
pub fn profile(cfg: &RunConfig) -> CliResult<Vec<ProfileRow>> {
    match cfg.precision {
        Precision::F32 => profile_as::<f32>(cfg),
        Precision::F64 => profile_as::<f64>(cfg),
    }
}

fn profile_as<T: Scalar>(cfg: &RunConfig) -> CliResult<Vec<ProfileRow>> {
    prepare_out(cfg)?;
    let model = GptAlpha::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kvm_layers: Vec<usize> = (0..cfg.model.n_layers).filter(|&l| cfg.model.mode(l) == AttentionMode::Kvm).collect();
    let mut rows = Vec::new();
    for &t in &cfg.profile.lengths {
        let ids: Vec<usize> = (0..t + cfg.profile.decode_tokens)
            .map(|_| rng.gen_range(0..cfg.model.vocab_size))
            .collect();
        let start = Instant::now();
        model.logits(&ids[..t])?;
        let prefill_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut session = Session::new(&model)?;
        session.prefill(&ids[..t])?;
        let state_rows = session.states().iter().flatten().map(|s| s.rows()).max().unwrap_or(0);
        let simulated_rows = kvm_layers
            .iter()
            .map(|&l| simulate(&cfg.model.layer_kvm(l), t).state_rows)
            .max()
            .unwrap_or(0);
        let start = Instant::now();
        for &id in &ids[t..] {
            session.push(id)?;
        }
        let decode_us_per_token = start.elapsed().as_secs_f64() * 1e6 / cfg.profile.decode_tokens.max(1) as f64;
        println!("T={t}: prefill {prefill_ms:.1} ms, decode {decode_us_per_token:.0} us/token, state rows {state_rows} (simulated {simulated_rows})");
        rows.push(ProfileRow {
            seq_len: t,
            prefill_ms,
            decode_us_per_token,
            state_rows,
            simulated_rows,
        });
    }
    write_csv(&cfg.out.join("profile.csv"), &rows)?;
    if rows.len() >= 2 {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.seq_len as f64, r.decode_us_per_token)).collect();
        println!("decode time slope {:.3}", loglog_slope(&pts)?);
    }
    Ok(rows)
}
