//! GPTAlpha-2 style decoder: token-shifted, QK-normalized attention with a
//! value residual and partial RoPE, followed by a ReLU² channel mixer.

mod checkpoint;
mod model;
mod params;
mod session;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvm::KvmConfig;

pub use checkpoint::Checkpoint;
pub use model::{GptAlpha, LayerVars, ModelVars};
pub use params::ParamStore;
pub use session::Session;

/// Attention engine of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Exact causal attention over the whole prefix.
    Full,
    /// Block sliding window only.
    Bswa,
    /// Block sliding window plus compressive state.
    Kvm,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Full => "full",
            AttentionMode::Bswa => "bswa",
            AttentionMode::Kvm => "kvm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptAlphaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    /// Channel-mixer width; 0 means `4 * d_model`.
    pub d_ff: usize,
    /// Attention mode per layer, repeated cyclically when shorter than
    /// `n_layers` (`[kvm, bswa]` alternates).
    pub modes: Vec<AttentionMode>,
    /// Rotary width per layer, repeated cyclically; empty uses
    /// `kvm.rotary_width` everywhere.
    pub rotary_widths: Vec<usize>,
    pub rope_base: f64,
    pub tie_embeddings: bool,
    pub kvm: KvmConfig,
}

impl Default for GptAlphaConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            vocab_size: 256,
            d_ff: 0,
            modes: vec![AttentionMode::Kvm],
            rotary_widths: Vec::new(),
            rope_base: 10_000.0,
            tie_embeddings: false,
            kvm: KvmConfig::default(),
        }
    }
}

impl GptAlphaConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ff_dim(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn mode(&self, layer: usize) -> AttentionMode {
        self.modes[layer % self.modes.len()]
    }

    pub fn rotary_width(&self, layer: usize) -> usize {
        if self.rotary_widths.is_empty() {
            self.kvm.rotary_width
        } else {
            self.rotary_widths[layer % self.rotary_widths.len()]
        }
    }

    /// KVM settings of one layer, with that layer's rotary width.
    pub fn layer_kvm(&self, layer: usize) -> KvmConfig {
        KvmConfig {
            rotary_width: self.rotary_width(layer),
            ..self.kvm.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.vocab_size == 0 {
            return err("d_model, n_heads, n_layers and vocab_size must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.modes.is_empty() {
            return err("modes must name at least one attention mode".into());
        }
        if !(self.rope_base > 0.0) {
            return err("rope_base must be positive".into());
        }
        for layer in 0..self.n_layers {
            self.layer_kvm(layer).validate(self.head_dim())?;
        }
        Ok(())
    }
}
