//! Key-Value Means attention: exact causal warm-up, then chunked attention
//! over a block sliding window concatenated with a compressive state that
//! absorbs each chunk falling out of the window.

mod decode;
mod forward;
mod fused;
mod params;
mod plan;
mod recurrence;
mod schedule;
mod select;
mod state;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decode::KvmDecoder;
pub use forward::{
    causal_attention, kvm_forward, kvm_forward_graph, windowed_attention_graph, KvmForwardOutput, KvmStreams,
};
pub use fused::{fused_prefill, fused_prefill_graph, FusedPrefill};
pub use params::{KvmLayerParams, KvmParamVars};
pub use plan::{build_mask, causal_mask, chunk_plans, ChunkPlan, StateStep};
pub use recurrence::{append_rows, init_state, merge_gate, merge_rows, prepare_memory_key, readout_views};
pub use schedule::{plan_budget, StateSchedule};
pub use select::{merge_targets, select_append, AppendSplit};
pub use state::KvmState;

/// Epsilon of the state LayerNorm `LN_s`.
pub const LN_EPS: f64 = 1e-5;

/// Component toggles used by the ablation study. All on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub sink_protection: bool,
    pub head_temperatures: bool,
    pub value_length_norm: bool,
    pub merge_gate: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            sink_protection: true,
            head_temperatures: true,
            value_length_norm: true,
            merge_gate: true,
        }
    }
}

impl Ablations {
    /// All 16 on/off combinations, ordered by bit pattern.
    pub fn all_combinations() -> Vec<Ablations> {
        (0..16u8)
            .map(|bits| Ablations {
                sink_protection: bits & 1 != 0,
                head_temperatures: bits & 2 != 0,
                value_length_norm: bits & 4 != 0,
                merge_gate: bits & 8 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvmConfig {
    /// Chunk length `C`.
    pub chunk_len: usize,
    /// Window length in chunks; the window holds `L = n_bswa_chunks * C` tokens.
    pub n_bswa_chunks: usize,
    /// Leading head channels carrying rotary position; zeroed in memory keys.
    pub rotary_width: usize,
    /// Protected sink rows `S` at the front of the state.
    pub sink_count: usize,
    pub eps_norm: f64,
    pub schedule: StateSchedule,
    pub ablations: Ablations,
}

impl Default for KvmConfig {
    fn default() -> Self {
        Self {
            chunk_len: 32,
            n_bswa_chunks: 2,
            rotary_width: 16,
            sink_count: 1,
            eps_norm: 1e-6,
            schedule: StateSchedule::sqrt(),
            ablations: Ablations::default(),
        }
    }
}

impl KvmConfig {
    pub fn window(&self) -> usize {
        self.chunk_len * self.n_bswa_chunks
    }

    /// Sinks actually protected from merging.
    pub fn protected_sinks(&self) -> usize {
        if self.ablations.sink_protection {
            self.sink_count
        } else {
            0
        }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.chunk_len == 0 || self.n_bswa_chunks == 0 {
            return Err(Error::Config(
                "chunk_len and n_bswa_chunks must be positive".into(),
            ));
        }
        if self.sink_count >= self.chunk_len {
            return Err(Error::Config(format!(
                "sink_count {} must be smaller than chunk_len {}",
                self.sink_count, self.chunk_len
            )));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::Config("eps_norm must be positive".into()));
        }
        crate::numerics::kernels::check_rotary_width(self.rotary_width, head_dim)?;
        self.schedule.validate()
    }
}
