use std::collections::VecDeque;

use crate::error::{dim_err, Result};
use crate::kvm::forward::attend;
use crate::kvm::recurrence::{evict_graph, gate_graph, init_graph, memory_keys_graph, readout_graph, scale_heads, GraphState};
use crate::kvm::{KvmConfig, KvmLayerParams, KvmState};
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Engine {
    Full,
    Window,
    Kvm,
}

/// One buffered token, each field `H * d_h` (or `H` for the gate), head-major.
#[derive(Clone, Debug)]
struct Slot<T> {
    k: Vec<T>,
    v: Vec<T>,
    kbar: Vec<T>,
    gate: Vec<T>,
}

/// Incremental single-sequence attention for one layer.
///
/// Produces the same outputs as the batched forward of the matching mode, one
/// token at a time. The KVM and windowed engines buffer at most `L + C`
/// tokens; the full engine keeps every key.
#[derive(Clone, Debug)]
pub struct KvmDecoder<T> {
    cfg: KvmConfig,
    engine: Engine,
    position: usize,
    /// Position of `buffer[0]`.
    first: usize,
    buffer: VecDeque<Slot<T>>,
    state: Option<KvmState<T>>,
}

impl<T: Scalar> KvmDecoder<T> {
    pub fn kvm(cfg: KvmConfig) -> Self {
        Self::with_engine(cfg, Engine::Kvm)
    }

    pub fn windowed(cfg: KvmConfig) -> Self {
        Self::with_engine(cfg, Engine::Window)
    }

    pub fn full(cfg: KvmConfig) -> Self {
        Self::with_engine(cfg, Engine::Full)
    }

    fn with_engine(cfg: KvmConfig, engine: Engine) -> Self {
        Self {
            cfg,
            engine,
            position: 0,
            first: 0,
            buffer: VecDeque::new(),
            state: None,
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn state(&self) -> Option<&KvmState<T>> {
        self.state.as_ref()
    }

    fn block(&self, field: impl Fn(&Slot<T>) -> &[T], positions: std::ops::Range<usize>, heads: usize, width: usize) -> Tensor<T> {
        let n = positions.len();
        let mut data = vec![T::zero(); heads * n * width];
        for (j, pos) in positions.enumerate() {
            let src = field(&self.buffer[pos - self.first]);
            for h in 0..heads {
                data[(h * n + j) * width..(h * n + j + 1) * width].copy_from_slice(&src[h * width..(h + 1) * width]);
            }
        }
        Tensor::new([heads, n, width], data).expect("block shape")
    }

    /// Consumes one token. `q`, `k`, `v` are `[H, 1, d_h]` and `x` is the
    /// `[1, d]` block input. Returns the `[H, 1, d_h]` output.
    pub fn step(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        x: &Tensor<T>,
        params: &KvmLayerParams<T>,
    ) -> Result<Tensor<T>> {
        let (heads, dh) = (params.heads(), params.head_dim());
        for t in [q, k, v] {
            if t.shape() != [heads, 1, dh] {
                return dim_err("decode_step", format!("expected [{heads}, 1, {dh}], got {:?}", t.shape()));
            }
        }
        self.cfg.validate(dh)?;
        let (c, l) = (self.cfg.chunk_len, self.cfg.window());
        let u = self.position;
        let mut g = Graph::new();
        let p = params.constants(&mut g, &self.cfg.ablations);

        let mut slot = Slot {
            k: k.data().to_vec(),
            v: v.data().to_vec(),
            kbar: Vec::new(),
            gate: Vec::new(),
        };
        if self.engine == Engine::Kvm {
            let kv = g.constant(k.clone());
            let kbar = memory_keys_graph(&mut g, kv, &p, self.cfg.rotary_width)?;
            slot.kbar = g.value(kbar).data().to_vec();
            let xv = g.constant(x.clone());
            if let Some(gate) = gate_graph(&mut g, xv, &p)? {
                slot.gate = g.value(gate).data().to_vec();
            }
        }
        self.buffer.push_back(slot);

        if self.engine != Engine::Full && u >= l && (u - l) % c == 0 {
            let window_start = u + c - l;
            if self.engine == Engine::Kvm {
                let block = window_start.saturating_sub(c)..window_start;
                let block = if self.state.is_none() { 0..c } else { block };
                let kb = g.constant(self.block(|s| &s.kbar, block.clone(), heads, dh));
                let vb = g.constant(self.block(|s| &s.v, block.clone(), heads, dh));
                let next = match &self.state {
                    None => init_graph(&mut g, kb, vb),
                    Some(state) => {
                        let st = GraphState::from_state(&mut g, state);
                        let gate = if self.cfg.ablations.merge_gate {
                            Some(g.constant(self.block(|s| &s.gate, block, heads, 1)))
                        } else {
                            None
                        };
                        evict_graph(&mut g, &st, kb, vb, gate, &p, &self.cfg, u + c)?
                    }
                };
                self.state = Some(next.to_state(&g, self.cfg.protected_sinks()));
            }
            while self.first < window_start {
                self.buffer.pop_front();
                self.first += 1;
            }
        }

        let window = self.first..u + 1;
        let kw = g.constant(self.block(|s| &s.k, window.clone(), heads, dh));
        let vw = g.constant(self.block(|s| &s.v, window, heads, dh));
        let kw = scale_heads(&mut g, kw, p.tau_bswa)?;
        let (keys, values) = match &self.state {
            Some(state) => {
                let st = GraphState::from_state(&mut g, state);
                let (ks, vs) = readout_graph(&mut g, &st, &p, &self.cfg)?;
                let ks = scale_heads(&mut g, ks, p.tau_state)?;
                (g.concat_rows(&[ks, kw])?, g.concat_rows(&[vs, vw])?)
            }
            None => (kw, vw),
        };
        let cols = g.shape(keys)[1];
        let qv = g.constant(q.clone());
        let out = attend(&mut g, qv, keys, values, &Tensor::zeros([1, cols]))?;
        self.position += 1;
        Ok(g.value(out).clone())
    }
}
