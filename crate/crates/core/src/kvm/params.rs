use rand::Rng;

use crate::kvm::Ablations;
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Learned tensors of one KVM attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KvmLayerParams<T> {
    /// Merge-gate projection `W_g`, `[d, H]`.
    pub w_gate: Tensor<T>,
    /// Inverse temperature on state keys, `[H, 1, 1]`.
    pub tau_state: Tensor<T>,
    /// Inverse temperature on window keys, `[H, 1, 1]`.
    pub tau_bswa: Tensor<T>,
    /// `LN_s` gain and bias, `[H, 1, d_h]`.
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
}

impl<T: Scalar> KvmLayerParams<T> {
    /// Neutral initialization: unit temperatures, identity `LN_s` affine and a
    /// zero gate projection so every gate starts at 1.
    pub fn init(d_model: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            w_gate: Tensor::zeros([d_model, heads]),
            tau_state: Tensor::ones([heads, 1, 1]),
            tau_bswa: Tensor::ones([heads, 1, 1]),
            ln_gain: Tensor::ones([heads, 1, head_dim]),
            ln_bias: Tensor::zeros([heads, 1, head_dim]),
        }
    }

    /// Random non-neutral parameters, for exercising every code path in tests.
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        Self {
            w_gate: Tensor::randn([d_model, heads], 0.5, rng),
            tau_state: Tensor::uniform([heads, 1, 1], 0.5, 2.0, rng),
            tau_bswa: Tensor::uniform([heads, 1, 1], 0.5, 2.0, rng),
            ln_gain: Tensor::uniform([heads, 1, head_dim], 0.5, 1.5, rng),
            ln_bias: Tensor::randn([heads, 1, head_dim], 0.2, rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.ln_gain.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.ln_gain.shape()[2]
    }

    /// Places the parameters on a graph as constants, honoring the ablations.
    pub fn constants(&self, g: &mut Graph<T>, ablations: &Ablations) -> KvmParamVars {
        KvmParamVars {
            w_gate: ablations.merge_gate.then(|| g.constant(self.w_gate.clone())),
            tau_state: ablations.head_temperatures.then(|| g.constant(self.tau_state.clone())),
            tau_bswa: ablations.head_temperatures.then(|| g.constant(self.tau_bswa.clone())),
            ln_gain: g.constant(self.ln_gain.clone()),
            ln_bias: g.constant(self.ln_bias.clone()),
        }
    }
}

/// Graph handles of a layer's KVM parameters. `None` entries are disabled by
/// an ablation and act as the neutral value (gate 1, temperature 1).
#[derive(Clone, Copy, Debug)]
pub struct KvmParamVars {
    pub w_gate: Option<Var>,
    pub tau_state: Option<Var>,
    pub tau_bswa: Option<Var>,
    pub ln_gain: Var,
    pub ln_bias: Var,
}
