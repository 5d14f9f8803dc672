use crate::backbone::model::ShiftCarry;
use crate::backbone::{AttentionMode, GptAlpha, ModelVars};
use crate::error::Result;
use crate::kvm::{KvmDecoder, KvmLayerParams, KvmState};
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;

/// Token-by-token inference with per-layer incremental attention. Logits
/// match [`GptAlpha::logits`] on the same prefix.
pub struct Session<'m, T: Scalar> {
    model: &'m GptAlpha<T>,
    graph: Graph<T>,
    vars: ModelVars,
    base: usize,
    decoders: Vec<KvmDecoder<T>>,
    kvm_params: Vec<KvmLayerParams<T>>,
    carries: Vec<Option<ShiftCarry<T>>>,
    position: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m GptAlpha<T>) -> Result<Self> {
        let mut graph = Graph::new();
        let vars = model.place(&mut graph, false)?;
        let cfg = &model.config;
        let decoders = (0..cfg.n_layers)
            .map(|l| match cfg.mode(l) {
                AttentionMode::Full => KvmDecoder::full(cfg.layer_kvm(l)),
                AttentionMode::Bswa => KvmDecoder::windowed(cfg.layer_kvm(l)),
                AttentionMode::Kvm => KvmDecoder::kvm(cfg.layer_kvm(l)),
            })
            .collect();
        let kvm_params = (0..cfg.n_layers).map(|l| model.kvm_layer_params(l)).collect::<Result<_>>()?;
        Ok(Self {
            model,
            base: graph.len(),
            graph,
            vars,
            decoders,
            kvm_params,
            carries: vec![None; cfg.n_layers],
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// State of each layer (`None` for non-KVM layers or before the first update).
    pub fn states(&self) -> Vec<Option<&KvmState<T>>> {
        self.decoders.iter().map(|d| d.state()).collect()
    }

    /// Tokens buffered by the attention engines, summed over layers.
    pub fn buffered(&self) -> usize {
        self.decoders.iter().map(|d| d.buffered()).sum()
    }

    /// Consumes one token and returns the `[1, V]` next-token logits.
    pub fn push(&mut self, id: usize) -> Result<Tensor<T>> {
        let Self {
            model,
            graph,
            vars,
            decoders,
            kvm_params,
            carries,
            ..
        } = self;
        let out = model.step_token(graph, vars, id, self.position, carries, |l, q, k, v, x| {
            decoders[l].step(q, k, v, x, &kvm_params[l])
        });
        graph.truncate(self.base);
        let out = out?;
        self.position += 1;
        Ok(out)
    }

    /// Feeds every id and returns the logits after the last one.
    pub fn prefill(&mut self, ids: &[usize]) -> Result<Option<Tensor<T>>> {
        let mut last = None;
        for &id in ids {
            last = Some(self.push(id)?);
        }
        Ok(last)
    }

    /// Greedy continuation of `n` tokens after the given prefix logits.
    pub fn greedy(&mut self, logits: &Tensor<T>, n: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        let mut current = logits.clone();
        for i in 0..n {
            let next = argmax(current.data());
            out.push(next);
            if i + 1 < n {
                current = self.push(next)?;
            }
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::GptAlphaConfig;
    use crate::kvm::{KvmConfig, StateSchedule};

    fn model(modes: Vec<AttentionMode>, seed: u64) -> GptAlpha<f64> {
        let cfg = GptAlphaConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            vocab_size: 11,
            modes,
            kvm: KvmConfig {
                chunk_len: 2,
                n_bswa_chunks: 2,
                rotary_width: 2,
                schedule: StateSchedule::PowerLaw {
                    coefficient: 1.0,
                    exponent: 0.5,
                },
                ..KvmConfig::default()
            },
            ..GptAlphaConfig::default()
        };
        let mut m = GptAlpha::new(cfg, seed).unwrap();
        m.jitter(0.3, seed + 100);
        m
    }

    #[test]
    fn matches_batched_logits() {
        use AttentionMode::*;
        let ids: Vec<usize> = (0..23).map(|i| (i * 7 + 3) % 11).collect();
        for modes in [vec![Kvm], vec![Bswa], vec![Full], vec![Kvm, Bswa, Full]] {
            let m = model(modes.clone(), 4);
            let batched = m.logits(&ids).unwrap();
            let mut s = Session::new(&m).unwrap();
            for (u, &id) in ids.iter().enumerate() {
                let row = s.push(id).unwrap();
                let diff = row
                    .data()
                    .iter()
                    .zip(batched.row(u))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-10, "{modes:?} u={u}: {diff}");
            }
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model(vec![AttentionMode::Kvm], 1);
        let run = || {
            let mut s = Session::new(&m).unwrap();
            let last = s.prefill(&[1, 2, 3, 4, 5, 6, 7]).unwrap().unwrap();
            s.greedy(&last, 5).unwrap()
        };
        assert_eq!(run(), run());
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
