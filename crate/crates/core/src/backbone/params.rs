use std::collections::HashMap;

use rand::Rng;

use crate::backbone::GptAlphaConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    decay: bool,
}

/// Ordered collection of named parameter tensors. Each entry records whether
/// it is a weight matrix (decayed) or a scalar/vector-like parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i] = Entry { name, value, decay },
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push(Entry { name, value, decay });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Invalid(format!("no parameter named `{name}`"))),
        }
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn decays(&self, i: usize) -> bool {
        self.entries[i].decay
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast(), e.decay);
        }
        out
    }

    /// Fresh parameters: scaled-normal matrices (std `1/sqrt(fan_in)`), unit
    /// LayerNorm gains, zero biases and token shifts, value-residual mix 0.5,
    /// unit temperatures and a zero merge-gate projection. An untied output
    /// head starts at zero so the untrained model predicts uniformly.
    pub fn init<R: Rng + ?Sized>(cfg: &GptAlphaConfig, rng: &mut R) -> Self {
        let (d, h, dh, ff, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.ff_dim(), cfg.vocab_size);
        let mut p = Self::new();
        let mat = |rows: usize, cols: usize, rng: &mut R| Tensor::randn([rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let embed_std = if cfg.tie_embeddings { 1.0 / (d as f64).sqrt() } else { 1.0 };
        p.insert("embed", Tensor::randn([v, d], embed_std, rng), true);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            p.insert(n("ln1.gain"), Tensor::ones([d]), false);
            p.insert(n("ln1.bias"), Tensor::zeros([d]), false);
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(n(&format!("attn.{w}")), mat(d, d, rng), true);
            }
            for s in ["shift_q", "shift_k", "shift_v"] {
                p.insert(n(&format!("attn.{s}")), Tensor::zeros([h, 1, dh]), false);
            }
            p.insert(n("attn.lambda"), Tensor::full([h, 1, dh], T::of(0.5)), false);
            for ln in ["lnq", "lnk", "lns"] {
                p.insert(n(&format!("attn.{ln}.gain")), Tensor::ones([h, 1, dh]), false);
                p.insert(n(&format!("attn.{ln}.bias")), Tensor::zeros([h, 1, dh]), false);
            }
            p.insert(n("attn.tau_state"), Tensor::ones([h, 1, 1]), false);
            p.insert(n("attn.tau_bswa"), Tensor::ones([h, 1, 1]), false);
            p.insert(n("attn.w_gate"), Tensor::zeros([d, h]), true);
            p.insert(n("ln2.gain"), Tensor::ones([d]), false);
            p.insert(n("ln2.bias"), Tensor::zeros([d]), false);
            p.insert(n("mix.shift"), Tensor::zeros([d]), false);
            p.insert(n("mix.wu"), mat(d, ff, rng), true);
            p.insert(n("mix.wd"), mat(ff, d, rng), true);
        }
        p.insert("ln_f.gain", Tensor::ones([d]), false);
        p.insert("ln_f.bias", Tensor::zeros([d]), false);
        if !cfg.tie_embeddings {
            p.insert("head", Tensor::zeros([d, v]), true);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GptAlphaConfig {
        GptAlphaConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 11,
            ..GptAlphaConfig::default()
        }
    }

    #[test]
    fn decay_only_on_matrices() {
        let p = ParamStore::<f64>::init(&small(), &mut ChaCha8Rng::seed_from_u64(0));
        for i in 0..p.len() {
            let name = p.name(i);
            let matrix = name.ends_with(".wq")
                || name.ends_with(".wk")
                || name.ends_with(".wv")
                || name.ends_with(".wo")
                || name.ends_with(".wu")
                || name.ends_with(".wd")
                || name.ends_with(".w_gate")
                || name == "embed"
                || name == "head";
            assert_eq!(p.decays(i), matrix, "{name}");
        }
    }

    #[test]
    fn neutral_initial_values() {
        let p = ParamStore::<f64>::init(&small(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.get("layers.1.attn.lambda").unwrap().data().iter().all(|&x| x == 0.5));
        assert!(p.get("layers.0.attn.w_gate").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(p.get("layers.0.mix.shift").unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(p.get("layers.0.mix.wu").unwrap().shape(), &[8, 32]);
        assert!(p.get("missing").is_err());
    }

    #[test]
    fn tied_model_has_no_head() {
        let cfg = GptAlphaConfig {
            tie_embeddings: true,
            ..small()
        };
        let p = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.position("head").is_none());
    }
}
