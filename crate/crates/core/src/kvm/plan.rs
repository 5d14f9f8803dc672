use std::ops::Range;

use crate::kvm::KvmConfig;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// What happens to the state before a chunk attends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateStep {
    /// The state is created from the first chunk of the sequence.
    Init(Range<usize>),
    /// The overflow block leaves the window and is appended or merged.
    Evict(Range<usize>),
}

/// Geometry of one post-warm-up query chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub index: usize,
    /// First query position `s`.
    pub start: usize,
    /// One past the last query position (clipped to the sequence).
    pub end: usize,
    /// `s + C`; differs from `end` only for a trailing partial chunk.
    pub nominal_end: usize,
    /// First window position `b = nominal_end - L`.
    pub window_start: usize,
    pub step: StateStep,
}

impl ChunkPlan {
    pub fn queries(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn window(&self) -> Range<usize> {
        self.window_start..self.end
    }
}

/// Chunk plans for every position past the warm-up region `[0, min(T, L))`.
pub fn chunk_plans(seq_len: usize, cfg: &KvmConfig) -> Vec<ChunkPlan> {
    let c = cfg.chunk_len;
    let l = cfg.window();
    let mut plans = Vec::new();
    let mut start = l;
    let mut index = 0;
    while start < seq_len {
        let nominal_end = start + c;
        let window_start = nominal_end - l;
        let step = if index == 0 {
            StateStep::Init(0..c)
        } else {
            StateStep::Evict(window_start - c..window_start)
        };
        plans.push(ChunkPlan {
            index,
            start,
            end: nominal_end.min(seq_len),
            nominal_end,
            window_start,
            step,
        });
        start = nominal_end;
        index += 1;
    }
    plans
}

/// Additive mask for the queries of `[start, end)` over `state_rows` state
/// keys followed by window keys at positions `[window_start, end)`.
pub fn build_mask<T: Scalar>(start: usize, end: usize, state_rows: usize, window_start: usize) -> Tensor<T> {
    let cols = state_rows + (end - window_start);
    Tensor::from_fn([end - start, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let u = start + r;
        if c < state_rows || window_start + (c - state_rows) <= u {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// Lower-triangular additive mask over `n` positions.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn([n, n], |i| if i % n <= i / n { T::zero() } else { T::neg_infinity() })
}
