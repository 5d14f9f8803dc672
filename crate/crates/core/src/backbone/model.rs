use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{AttentionMode, GptAlphaConfig, ParamStore};
use crate::error::{Error, Result};
use crate::kvm::{causal_attention, kvm_forward_graph, windowed_attention_graph, KvmLayerParams, KvmParamVars, KvmState, KvmStreams};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Epsilon of every backbone LayerNorm.
pub const NORM_EPS: f64 = 1e-5;

/// Graph handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub shift_q: Var,
    pub shift_k: Var,
    pub shift_v: Var,
    pub lambda: Var,
    pub lnq: (Var, Var),
    pub lnk: (Var, Var),
    pub kvm: KvmParamVars,
    pub ln2: (Var, Var),
    pub mix_shift: Var,
    pub wu: Var,
    pub wd: Var,
}

/// Every parameter placed on a graph. `all` follows the store order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f: (Var, Var),
    pub head: Option<Var>,
}

/// Pre-shift rows of the previous token, used to continue a token shift
/// across calls. `q`, `k`, `v` are `[H, 1, d_h]`, `mix` is `[1, d]`.
#[derive(Clone, Debug)]
pub(crate) struct ShiftCarry<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub mix: Tensor<T>,
}

pub(crate) struct Prepared {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Projections before the token shift (after the value residual).
    pub raw: [Var; 3],
    pub v_first: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GptAlpha<T> {
    pub config: GptAlphaConfig,
    pub params: ParamStore<T>,
}

/// `[T, d] -> [H, T, d_h]`
pub(crate) fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[t, heads, d / heads])?;
    g.swap_axes01(r)
}

/// `[H, T, d_h] -> [T, d]`
pub(crate) fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.swap_axes01(x)?;
    g.reshape(r, &[s[1], s[0] * s[2]])
}

/// `a + alpha * (a_prev - a)` along the row axis. Without `prev` the first row
/// is its own predecessor.
pub(crate) fn token_shift<T: Scalar>(g: &mut Graph<T>, a: Var, alpha: Var, prev: Option<Var>) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let n = shape[shape.len() - 2];
    let shifted = match prev {
        None => g.shift_rows(a),
        Some(p) => {
            let both = g.concat_rows(&[p, a])?;
            g.slice_rows(both, 0, n)?
        }
    };
    let delta = g.sub(shifted, a)?;
    let delta = g.mul(alpha, delta)?;
    g.add(a, delta)
}

/// `ReLU((x + alpha (x_prev - x)) W_U)^2 W_D`
pub fn channel_mixer<T: Scalar>(g: &mut Graph<T>, x: Var, alpha: Var, wu: Var, wd: Var, prev: Option<Var>) -> Result<Var> {
    let mixed = token_shift(g, x, alpha, prev)?;
    let h = g.matmul(mixed, wu)?;
    let h = g.relu_squared(h);
    g.matmul(h, wd)
}

impl<T: Scalar> GptAlpha<T> {
    pub fn new(config: GptAlphaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params })
    }

    /// Pairs a configuration with existing parameters, checking every shape.
    pub fn from_parts(config: GptAlphaConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = ParamStore::<T>::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        if reference.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration expects {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, expected) in reference.iter() {
            let got = params.get(name).map_err(|_| Error::Config(format!("missing parameter `{name}`")))?;
            if got.shape() != expected.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, configuration expects {:?}",
                    got.shape(),
                    expected.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Adds uniform noise in `[-scale, scale)` to every parameter, moving the
    /// model off its neutral initialization (the zero head hides every other
    /// gradient). Used by gradient checks and tests.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.params.len() {
            for x in self.params.value_mut(i).data_mut() {
                *x += T::of(rng.gen_range(-scale..scale));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> GptAlpha<U> {
        GptAlpha {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Places all parameters on `g`, as trainable leaves or as constants.
    pub fn place(&self, g: &mut Graph<T>, trainable: bool) -> Result<ModelVars> {
        let all: Vec<Var> = (0..self.params.len())
            .map(|i| {
                let v = self.params.value(i).clone();
                if trainable {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        let at = |name: &str| -> Result<Var> {
            self.params
                .position(name)
                .map(|i| all[i])
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        };
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let pair = |s: &str| -> Result<(Var, Var)> { Ok((at(&n(&format!("{s}.gain")))?, at(&n(&format!("{s}.bias")))?)) };
            let ab = self.config.layer_kvm(l).ablations;
            let lns = pair("attn.lns")?;
            layers.push(LayerVars {
                ln1: pair("ln1")?,
                wq: at(&n("attn.wq"))?,
                wk: at(&n("attn.wk"))?,
                wv: at(&n("attn.wv"))?,
                wo: at(&n("attn.wo"))?,
                shift_q: at(&n("attn.shift_q"))?,
                shift_k: at(&n("attn.shift_k"))?,
                shift_v: at(&n("attn.shift_v"))?,
                lambda: at(&n("attn.lambda"))?,
                lnq: pair("attn.lnq")?,
                lnk: pair("attn.lnk")?,
                kvm: KvmParamVars {
                    w_gate: if ab.merge_gate { Some(at(&n("attn.w_gate"))?) } else { None },
                    tau_state: if ab.head_temperatures { Some(at(&n("attn.tau_state"))?) } else { None },
                    tau_bswa: if ab.head_temperatures { Some(at(&n("attn.tau_bswa"))?) } else { None },
                    ln_gain: lns.0,
                    ln_bias: lns.1,
                },
                ln2: pair("ln2")?,
                mix_shift: at(&n("mix.shift"))?,
                wu: at(&n("mix.wu"))?,
                wd: at(&n("mix.wd"))?,
            });
        }
        Ok(ModelVars {
            embed: at("embed")?,
            ln_f: (at("ln_f.gain")?, at("ln_f.bias")?),
            head: if self.config.tie_embeddings { None } else { Some(at("head")?) },
            layers,
            all,
        })
    }

    /// KVM tensors of one layer, for the incremental decoder.
    pub fn kvm_layer_params(&self, layer: usize) -> Result<KvmLayerParams<T>> {
        let get = |s: &str| self.params.get(&format!("layers.{layer}.attn.{s}")).cloned();
        Ok(KvmLayerParams {
            w_gate: get("w_gate")?,
            tau_state: get("tau_state")?,
            tau_bswa: get("tau_bswa")?,
            ln_gain: get("lns.gain")?,
            ln_bias: get("lns.bias")?,
        })
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Projections, value residual, token shift, QK LayerNorm and partial
    /// RoPE for `[n, d]` normalized inputs at `positions`.
    pub(crate) fn qkv_prepare(
        &self,
        g: &mut Graph<T>,
        lv: &LayerVars,
        layer: usize,
        h: Var,
        v_first: Option<Var>,
        prev: Option<[Var; 3]>,
        positions: &[usize],
    ) -> Result<Prepared> {
        let heads = self.config.n_heads;
        let project = |g: &mut Graph<T>, w: Var| -> Result<Var> {
            let p = g.matmul(h, w)?;
            split_heads(g, p, heads)
        };
        let q = project(g, lv.wq)?;
        let k = project(g, lv.wk)?;
        let mut v = project(g, lv.wv)?;
        let v_first = match v_first {
            None => v,
            Some(first) => {
                // (1 - lambda) v + lambda v_first
                let one = g.constant(Tensor::scalar(T::one()));
                let keep = g.sub(one, lv.lambda)?;
                let a = g.mul(keep, v)?;
                let b = g.mul(lv.lambda, first)?;
                v = g.add(a, b)?;
                first
            }
        };
        let prev = prev.map(|p| p.map(Some)).unwrap_or([None; 3]);
        let qs = token_shift(g, q, lv.shift_q, prev[0])?;
        let ks = token_shift(g, k, lv.shift_k, prev[1])?;
        let vs = token_shift(g, v, lv.shift_v, prev[2])?;
        let eps = T::of(NORM_EPS);
        let r = self.config.rotary_width(layer);
        let base = self.config.rope_base;
        let qn = g.layer_norm(qs, lv.lnq.0, lv.lnq.1, eps)?;
        let kn = g.layer_norm(ks, lv.lnk.0, lv.lnk.1, eps)?;
        Ok(Prepared {
            q: g.rope(qn, positions, r, base)?,
            k: g.rope(kn, positions, r, base)?,
            v: vs,
            raw: [q, k, v],
            v_first,
        })
    }

    fn attention(&self, g: &mut Graph<T>, layer: usize, lv: &LayerVars, p: &Prepared, h: Var) -> Result<(Var, Option<KvmState<T>>)> {
        let cfg = self.config.layer_kvm(layer);
        let streams = KvmStreams {
            q: p.q,
            k: p.k,
            v: p.v,
            x: h,
        };
        Ok(match self.config.mode(layer) {
            AttentionMode::Full => (causal_attention(g, p.q, p.k, p.v, lv.kvm.tau_bswa)?, None),
            AttentionMode::Bswa => (windowed_attention_graph(g, &streams, &lv.kvm, &cfg)?, None),
            AttentionMode::Kvm => kvm_forward_graph(g, &streams, &lv.kvm, &cfg)?,
        })
    }

    fn head(&self, g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<Var> {
        let x = g.layer_norm(x, vars.ln_f.0, vars.ln_f.1, T::of(NORM_EPS))?;
        match vars.head {
            Some(w) => g.matmul(x, w),
            None => g.matmul_ex(x, vars.embed, false, true),
        }
    }

    /// `[T, V]` logits for one sequence plus each KVM layer's final state.
    pub fn forward_with_states(&self, g: &mut Graph<T>, vars: &ModelVars, ids: &[usize]) -> Result<(Var, Vec<Option<KvmState<T>>>)> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::Invalid("sequence must hold at least one token".into()));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = g.gather_rows(vars.embed, ids)?;
        let mut v_first = None;
        let mut states = Vec::with_capacity(vars.layers.len());
        for (l, lv) in vars.layers.iter().enumerate() {
            let h = g.layer_norm(x, lv.ln1.0, lv.ln1.1, T::of(NORM_EPS))?;
            let p = self.qkv_prepare(g, lv, l, h, v_first, None, &positions)?;
            v_first = Some(p.v_first);
            let (att, state) = self.attention(g, l, lv, &p, h)?;
            states.push(state);
            let merged = merge_heads(g, att)?;
            let y = g.matmul(merged, lv.wo)?;
            x = g.add(x, y)?;
            let h2 = g.layer_norm(x, lv.ln2.0, lv.ln2.1, T::of(NORM_EPS))?;
            let m = channel_mixer(g, h2, lv.mix_shift, lv.wu, lv.wd, None)?;
            x = g.add(x, m)?;
        }
        Ok((self.head(g, vars, x)?, states))
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &ModelVars, ids: &[usize]) -> Result<Var> {
        Ok(self.forward_with_states(g, vars, ids)?.0)
    }

    /// Mean next-token cross-entropy of a sequence of at least two tokens.
    pub fn loss(&self, g: &mut Graph<T>, vars: &ModelVars, seq: &[usize]) -> Result<Var> {
        if seq.len() < 2 {
            return Err(Error::Invalid("loss needs at least two tokens".into()));
        }
        let logits = self.forward(g, vars, &seq[..seq.len() - 1])?;
        g.cross_entropy(logits, &seq[1..])
    }

    /// `[T, V]` logits with constant parameters.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.place(&mut g, false)?;
        let out = self.forward(&mut g, &vars, ids)?;
        Ok(g.value(out).clone())
    }

    /// Negative log-likelihood of `seq[t + 1]` at every position `t`.
    pub fn token_losses(&self, seq: &[usize]) -> Result<Vec<f64>> {
        if seq.len() < 2 {
            return Err(Error::Invalid("loss needs at least two tokens".into()));
        }
        let logits = self.logits(&seq[..seq.len() - 1])?;
        Ok(seq[1..].iter().enumerate().map(|(t, &y)| nll(logits.row(t), y)).collect())
    }

    /// One-token step shared with the decoding session: runs every layer on a
    /// `[1, d]` embedding using `attend` for the attention engine.
    pub(crate) fn step_token(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        id: usize,
        position: usize,
        carries: &mut [Option<ShiftCarry<T>>],
        mut attend: impl FnMut(usize, &Tensor<T>, &Tensor<T>, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        self.check_ids(&[id])?;
        let mut x = g.gather_rows(vars.embed, &[id])?;
        let mut v_first = None;
        for (l, lv) in vars.layers.iter().enumerate() {
            let h = g.layer_norm(x, lv.ln1.0, lv.ln1.1, T::of(NORM_EPS))?;
            let prev = carries[l]
                .as_ref()
                .map(|c| [g.constant(c.q.clone()), g.constant(c.k.clone()), g.constant(c.v.clone())]);
            let prev_mix = carries[l].as_ref().map(|c| g.constant(c.mix.clone()));
            let p = self.qkv_prepare(g, lv, l, h, v_first, prev, &[position])?;
            v_first = Some(p.v_first);
            let out = attend(l, g.value(p.q), g.value(p.k), g.value(p.v), g.value(h))?;
            let att = g.constant(out);
            let merged = merge_heads(g, att)?;
            let y = g.matmul(merged, lv.wo)?;
            x = g.add(x, y)?;
            let h2 = g.layer_norm(x, lv.ln2.0, lv.ln2.1, T::of(NORM_EPS))?;
            let m = channel_mixer(g, h2, lv.mix_shift, lv.wu, lv.wd, prev_mix)?;
            x = g.add(x, m)?;
            carries[l] = Some(ShiftCarry {
                q: g.value(p.raw[0]).clone(),
                k: g.value(p.raw[1]).clone(),
                v: g.value(p.raw[2]).clone(),
                mix: g.value(h2).clone(),
            });
        }
        let logits = self.head(g, vars, x)?;
        Ok(g.value(logits).clone())
    }
}

/// `logsumexp(row) - row[y]` in double precision.
pub(crate) fn nll<T: Scalar>(row: &[T], y: usize) -> f64 {
    let max = row.iter().map(|z| z.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[y].as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvm::{KvmConfig, StateSchedule};

    fn cfg(modes: Vec<AttentionMode>) -> GptAlphaConfig {
        GptAlphaConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 13,
            modes,
            kvm: KvmConfig {
                chunk_len: 2,
                n_bswa_chunks: 2,
                rotary_width: 2,
                schedule: StateSchedule::sqrt(),
                ..KvmConfig::default()
            },
            ..GptAlphaConfig::default()
        }
    }

    fn perturbed(model: &mut GptAlpha<f64>, seed: u64) {
        model.jitter(0.3, seed);
    }

    #[test]
    fn untrained_head_is_uniform() {
        let m = GptAlpha::<f64>::new(cfg(vec![AttentionMode::Kvm]), 0).unwrap();
        let losses = m.token_losses(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        for l in losses {
            assert!((l - 13f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let m = GptAlpha::<f64>::new(cfg(vec![AttentionMode::Full]), 0).unwrap();
        assert!(matches!(m.logits(&[1, 13]), Err(Error::TokenOutOfRange { id: 13, vocab: 13 })));
    }

    #[test]
    fn deterministic_finite_logits() {
        let mut c = cfg(vec![AttentionMode::Kvm]);
        c.n_layers = 1;
        let mut m = GptAlpha::<f64>::new(c, 3).unwrap();
        perturbed(&mut m, 1);
        let a = m.logits(&[0, 5, 7, 2]).unwrap();
        assert_eq!(a.shape(), &[4, 13]);
        assert!(a.is_finite());
        assert_eq!(a, m.logits(&[0, 5, 7, 2]).unwrap());
    }

    #[test]
    fn kvm_matches_full_inside_the_window() {
        let mut kvm = GptAlpha::<f64>::new(cfg(vec![AttentionMode::Kvm]), 5).unwrap();
        perturbed(&mut kvm, 2);
        let mut full = kvm.clone();
        full.config.modes = vec![AttentionMode::Full];
        let ids = [3, 1, 4, 1];
        let diff = kvm.logits(&ids).unwrap().max_abs_diff(&full.logits(&ids).unwrap()).unwrap();
        assert!(diff <= 1e-10, "{diff}");
        let longer = [3, 1, 4, 1, 5, 9, 2, 6, 5];
        let diff = kvm.logits(&longer).unwrap().max_abs_diff(&full.logits(&longer).unwrap()).unwrap();
        assert!(diff > 1e-8, "state should change outputs past the window");
    }

    #[test]
    fn first_layer_value_residual_is_identity() {
        let mut m = GptAlpha::<f64>::new(cfg(vec![AttentionMode::Full]), 5).unwrap();
        perturbed(&mut m, 4);
        let mut g = Graph::new();
        let vars = m.place(&mut g, false).unwrap();
        let h = g.constant(Tensor::from_fn([3, 8], |i| (i as f64 * 0.37).sin()));
        let p = m.qkv_prepare(&mut g, &vars.layers[0], 0, h, None, None, &[0, 1, 2]).unwrap();
        let wv = g.matmul(h, vars.layers[0].wv).unwrap();
        let expect = split_heads(&mut g, wv, 2).unwrap();
        assert_eq!(g.value(p.raw[2]), g.value(expect));
        assert_eq!(p.v_first, p.raw[2]);
    }

    #[test]
    fn token_shift_endpoints() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 3, 2], |i| i as f64 * 1.5 - 2.0));
        let one = g.constant(Tensor::ones([2, 1, 2]));
        let zero = g.constant(Tensor::zeros([2, 1, 2]));
        let half = g.constant(Tensor::full([2, 1, 2], 0.5));
        let same = token_shift(&mut g, a, zero, None).unwrap();
        assert_eq!(g.value(same), g.value(a));
        let delayed = token_shift(&mut g, a, one, None).unwrap();
        let mixed = token_shift(&mut g, a, half, None).unwrap();
        let (av, dv, mv) = (g.value(a), g.value(delayed), g.value(mixed));
        for h in 0..2 {
            assert_eq!(dv.row(h * 3), av.row(h * 3));
            assert_eq!(mv.row(h * 3), av.row(h * 3));
            for t in 1..3 {
                assert_eq!(dv.row(h * 3 + t), av.row(h * 3 + t - 1));
            }
        }
    }

    #[test]
    fn channel_mixer_matches_composition() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn([4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.4);
        let alpha = Tensor::from_f64([3], &[0.2, -0.5, 1.0]).unwrap();
        let wu = Tensor::from_fn([3, 5], |i| ((i * 3 % 7) as f64 - 3.0) * 0.3);
        let wd = Tensor::from_fn([5, 3], |i| ((i * 5 % 11) as f64 - 5.0) * 0.2);
        let (xv, av, uv, dv) = (g.constant(x.clone()), g.constant(alpha.clone()), g.constant(wu.clone()), g.constant(wd.clone()));
        let out = channel_mixer(&mut g, xv, av, uv, dv, None).unwrap();
        for t in 0..4 {
            let prev = if t == 0 { x.row(0) } else { x.row(t - 1) };
            let mixed: Vec<f64> = (0..3).map(|c| x.row(t)[c] + alpha.data()[c] * (prev[c] - x.row(t)[c])).collect();
            let hidden: Vec<f64> = (0..5)
                .map(|j| (0..3).map(|c| mixed[c] * wu.data()[c * 5 + j]).sum::<f64>().max(0.0).powi(2))
                .collect();
            for c in 0..3 {
                let expect: f64 = (0..5).map(|j| hidden[j] * wd.data()[j * 3 + c]).sum();
                assert!((g.value(out).row(t)[c] - expect).abs() <= 1e-12);
            }
        }
        let zeros = g.constant(Tensor::zeros([4, 3]));
        let z = channel_mixer(&mut g, zeros, av, uv, dv, None).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nope_is_offset_invariant() {
        let mut c = cfg(vec![AttentionMode::Kvm]);
        c.kvm.rotary_width = 0;
        let mut m = GptAlpha::<f64>::new(c, 1).unwrap();
        perturbed(&mut m, 9);
        let mut g = Graph::new();
        let vars = m.place(&mut g, false).unwrap();
        let h = g.constant(Tensor::from_fn([3, 8], |i| (i as f64 * 0.21).cos()));
        let a = m.qkv_prepare(&mut g, &vars.layers[0], 0, h, None, None, &[0, 1, 2]).unwrap();
        let b = m.qkv_prepare(&mut g, &vars.layers[0], 0, h, None, None, &[100, 101, 102]).unwrap();
        assert_eq!(g.value(a.q), g.value(b.q));
        assert_eq!(g.value(a.k), g.value(b.k));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = GptAlpha::<f64>::new(cfg(vec![AttentionMode::Kvm]), 0).unwrap();
        let mut wider = m.config.clone();
        wider.d_model = 12;
        assert!(matches!(GptAlpha::from_parts(wider, m.params.clone()), Err(Error::Config(_))));
        GptAlpha::from_parts(m.config.clone(), m.params.clone()).unwrap();
    }
}
