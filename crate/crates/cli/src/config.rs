//! The run configuration document, presets and validation.

use std::path::{Path, PathBuf};

use kvm_core::backbone::{AttentionMode, GptAlphaConfig};
use kvm_core::checks::CheckLevel;
use kvm_core::data::{CorpusKind, DistractorKind};
use kvm_core::kvm::{KvmConfig, StateSchedule};
use kvm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// KVM on every layer with a fixed state.
    KvmFixed,
    /// KVM on every layer with the `16 sqrt(N)` growth schedule.
    KvmSqrt,
    /// Block sliding-window attention on every layer.
    Bswa,
    /// Full causal attention on every layer.
    Full,
    /// Saturating-schedule KVM and BSWA on alternate layers.
    Hybrid,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::KvmFixed, Preset::KvmSqrt, Preset::Bswa, Preset::Full, Preset::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Preset::KvmFixed => "kvm-fixed",
            Preset::KvmSqrt => "kvm-sqrt",
            Preset::Bswa => "bswa",
            Preset::Full => "full",
            Preset::Hybrid => "hybrid",
        }
    }

    /// The preset's model on top of the desk-scale defaults.
    pub fn model(self) -> GptAlphaConfig {
        let mut m = desk_model();
        match self {
            Preset::KvmFixed => m.kvm.schedule = StateSchedule::Fixed { size: 64 },
            Preset::KvmSqrt => m.kvm.schedule = StateSchedule::sqrt(),
            Preset::Bswa => m.modes = vec![AttentionMode::Bswa],
            Preset::Full => m.modes = vec![AttentionMode::Full],
            Preset::Hybrid => {
                m.modes = vec![AttentionMode::Kvm, AttentionMode::Bswa];
                m.kvm.schedule = StateSchedule::Saturating {
                    cap: 128,
                    coefficient: 16.0,
                    exponent: 0.5,
                };
            }
        }
        m
    }
}

/// Two layers of width 64 with 32-token chunks and a 64-token window.
pub fn desk_model() -> GptAlphaConfig {
    GptAlphaConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        vocab_size: kvm_core::data::BYTE_VOCAB,
        modes: vec![AttentionMode::Kvm],
        kvm: KvmConfig {
            chunk_len: 32,
            n_bswa_chunks: 2,
            rotary_width: 8,
            ..KvmConfig::default()
        },
        ..GptAlphaConfig::default()
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        warmup_steps: 100,
        total_steps: 1500,
        batch_size: 8,
        seq_len: 256,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub kind: CorpusKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generated training documents, drawn per sequence by weight.
    pub mixture: Vec<MixtureEntry>,
    /// A corpus file in the text+hex format; replaces the mixture when set.
    pub corpus: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mixture: vec![
                MixtureEntry {
                    kind: CorpusKind::MarkovText,
                    weight: 0.2,
                },
                MixtureEntry {
                    kind: CorpusKind::StructuredKv,
                    weight: 0.8,
                },
            ],
            corpus: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    Niah,
    LossByPosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NiahConfig {
    pub context_len: usize,
    pub depths: Vec<f64>,
    pub samples: usize,
    pub distractors: Vec<DistractorKind>,
}

impl Default for NiahConfig {
    fn default() -> Self {
        Self {
            context_len: 256,
            depths: vec![0.1, 0.5, 0.9],
            samples: 50,
            distractors: vec![DistractorKind::NovelText, DistractorKind::Repeated],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossEvalConfig {
    pub n_docs: usize,
    pub doc_len: usize,
    pub block: usize,
    pub kind: CorpusKind,
}

impl Default for LossEvalConfig {
    fn default() -> Self {
        Self {
            n_docs: 8,
            doc_len: 4096,
            block: 64,
            kind: CorpusKind::MarkovText,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task: EvalTask,
    /// Defaults to `checkpoint.kvmc` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub niah: NiahConfig,
    pub loss: LossEvalConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: EvalTask::Niah,
            checkpoint: None,
            niah: NiahConfig::default(),
            loss: LossEvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub level: CheckLevel,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { level: CheckLevel::Fast }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub schedules: Vec<StateSchedule>,
    /// Sequence lengths `2^min_log2 ..= 2^max_log2`.
    pub min_log2: u32,
    pub max_log2: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            schedules: vec![StateSchedule::Fixed { size: 256 }, StateSchedule::sqrt(), StateSchedule::Unbounded],
            min_log2: 10,
            max_log2: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub lengths: Vec<usize>,
    /// Tokens decoded after each prefill for the per-token timing.
    pub decode_tokens: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048],
            decode_tokens: 64,
        }
    }
}

/// Everything a command needs, from one JSON document. Every field has a
/// default; `preset` supplies the model defaults it names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    pub model: GptAlphaConfig,
    pub train: TrainConfig,
    /// Write a checkpoint every this many steps as well as at the end; 0
    /// writes only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub check: CheckConfig,
    pub sim: SimConfig,
    pub profile: ProfileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            out: PathBuf::from("runs/default"),
            precision: Precision::F32,
            model: desk_model(),
            train: desk_train(),
            checkpoint_every: 0,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            check: CheckConfig::default(),
            sim: SimConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        // A differently tagged variant replaces the base outright.
        (Value::Object(b), Value::Object(t)) if t.get("kind").is_some_and(|k| b.get("kind") != Some(k)) => {
            *b = t;
        }
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(source: &str, e: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let field = if path.is_empty() || path == "." { String::new() } else { format!(" at `{path}`") };
    CliError::Config(format!("{source}: line {} column {}{field}: {inner}", inner.line(), inner.column()))
}

impl RunConfig {
    /// Parses a document, applying its preset (or the override's) beneath
    /// the explicitly written fields, then the command-line overrides.
    pub fn parse(text: &str, source: &str, overrides: &Overrides) -> Result<Self, CliError> {
        // Strict pass over the document alone for precise errors.
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| config_error(source, e))?;
        let written: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
        let preset = overrides.preset.or(doc.preset);
        let mut cfg = match preset {
            Some(p) => {
                let mut base = serde_json::to_value(RunConfig {
                    preset: Some(p),
                    model: p.model(),
                    ..RunConfig::default()
                })
                .expect("config serializes");
                merge(&mut base, written);
                let mut cfg: RunConfig = serde_json::from_value(base).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
                cfg.preset = Some(p);
                cfg
            }
            None => doc,
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse("{}", "defaults", overrides),
        }
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        // One seed drives initialization, data and the trainer.
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: kvm_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        for s in &self.sim.schedules {
            s.validate().map_err(wrap)?;
        }
        if self.data.corpus.is_none() && !self.data.mixture.iter().any(|m| m.weight > 0.0) {
            return Err(CliError::Config("data.mixture needs a positive weight".into()));
        }
        if self.data.mixture.iter().any(|m| !(m.weight >= 0.0 && m.weight.is_finite())) {
            return Err(CliError::Config("data.mixture weights must be finite and non-negative".into()));
        }
        if self.eval.niah.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(CliError::Config("eval.niah.depths must lie in [0, 1]".into()));
        }
        if self.eval.loss.block == 0 || self.eval.loss.doc_len <= self.eval.loss.block {
            return Err(CliError::Config("eval.loss.doc_len must exceed eval.loss.block > 0".into()));
        }
        if self.sim.min_log2 >= self.sim.max_log2 || self.sim.max_log2 > 40 {
            return Err(CliError::Config("sim needs min_log2 < max_log2 <= 40".into()));
        }
        if self.profile.lengths.is_empty() || self.profile.lengths.contains(&0) {
            return Err(CliError::Config("profile.lengths must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved document as `config.json` in the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("config serializes") + "\n")?;
        Ok(path)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.kvmc"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, "test", &Overrides::default())
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_field_names_line_and_path() {
        let err = parse("{\n  \"model\": {\n    \"d_modle\": 3\n  }\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("model"), "{err}");
        assert!(err.contains("d_modle"), "{err}");
    }

    #[test]
    fn wrong_type_names_field() {
        let err = parse("{\"train\": {\"base_lr\": \"fast\"}}").unwrap_err().to_string();
        assert!(err.contains("train.base_lr"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(parse("{\"model\": {\"n_heads\": 3}}"), Err(CliError::Config(_))));
        assert!(matches!(parse("{\"train\": {\"warmup_steps\": 5000}}"), Err(CliError::Config(_))));
    }

    #[test]
    fn preset_sits_beneath_written_fields() {
        let cfg = parse(r#"{"preset": "bswa", "model": {"d_model": 32}}"#).unwrap();
        assert_eq!(cfg.model.modes, vec![AttentionMode::Bswa]);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.n_layers, 2);
    }

    #[test]
    fn written_schedule_variant_replaces_the_preset_one() {
        let text = r#"{"preset": "kvm-fixed", "model": {"kvm": {"schedule": {"kind": "unbounded"}}}}"#;
        assert_eq!(parse(text).unwrap().model.kvm.schedule, StateSchedule::Unbounded);
        // Schedules are complete objects; a partial one is rejected before merging.
        let partial = r#"{"preset": "hybrid", "model": {"kvm": {"schedule": {"kind": "saturating", "cap": 7}}}}"#;
        assert!(matches!(parse(partial), Err(CliError::Config(_))));
    }

    #[test]
    fn flags_beat_the_document() {
        let o = Overrides {
            seed: Some(9),
            out: Some("x".into()),
            preset: Some(Preset::Full),
        };
        let cfg = RunConfig::parse(r#"{"seed": 3, "preset": "bswa"}"#, "t", &o).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.out, PathBuf::from("x"));
        assert_eq!(cfg.model.modes, vec![AttentionMode::Full]);
    }

    #[test]
    fn resolved_config_round_trips() {
        for p in Preset::ALL {
            let cfg = RunConfig::parse(&format!(r#"{{"preset": "{}"}}"#, p.name()), "t", &Overrides::default()).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(RunConfig::parse(&text, "t", &Overrides::default()).unwrap(), cfg);
        }
    }
}
