use crate::error::{dim_err, Error, Result};
use crate::kvm::recurrence::{scale_heads, Recurrence};
use crate::kvm::{build_mask, causal_mask, chunk_plans, KvmConfig, KvmLayerParams, KvmParamVars, KvmState};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Per-layer attention inputs on a graph. `q`, `k`, `v` are `[H, T, d_h]`
/// with RoPE already applied to `q` and `k`; `x` is the `[T, d]` block input
/// that drives the merge gate.
#[derive(Clone, Copy, Debug)]
pub struct KvmStreams {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub x: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvmForwardOutput<T> {
    /// `[H, T, d_h]` per-head attention outputs.
    pub output: Tensor<T>,
    /// State after the last chunk; `None` while the sequence fits the window.
    pub state: Option<KvmState<T>>,
}

pub(crate) fn head_dims<T: Scalar>(g: &Graph<T>, s: &KvmStreams) -> Result<(usize, usize, usize)> {
    let q = g.shape(s.q).to_vec();
    if q.len() != 3 {
        return dim_err("kvm_forward", format!("expected [H, T, d_h] queries, got {q:?}"));
    }
    for other in [s.k, s.v] {
        if g.shape(other) != q.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "kvm_forward",
                lhs: q,
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    if g.shape(s.x).len() != 2 || g.shape(s.x)[0] != q[1] {
        return Err(Error::ShapeMismatch {
            op: "kvm_forward",
            lhs: q,
            rhs: g.shape(s.x).to_vec(),
        });
    }
    if q[1] == 0 {
        return Err(Error::Invalid("sequence must hold at least one token".into()));
    }
    Ok((q[0], q[1], q[2]))
}

/// `softmax(q K^T / sqrt(d_h) + M) V` for `[H, n, d_h]` queries.
pub(crate) fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, keys: Var, values: Var, mask: &Tensor<T>) -> Result<Var> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let logits = g.matmul_ex(q, keys, false, true)?;
    let logits = g.scale(logits, T::one() / T::of(dh as f64).sqrt());
    let probs = g.masked_softmax(logits, Some(mask))?;
    g.matmul(probs, values)
}

/// Exact causal attention over `[H, T, d_h]` streams, keys scaled by `tau`.
pub fn causal_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, tau: Option<Var>) -> Result<Var> {
    let n = g.shape(q)[1];
    let kt = scale_heads(g, k, tau)?;
    attend(g, q, kt, v, &causal_mask(n))
}

fn chunked<T: Scalar>(
    g: &mut Graph<T>,
    s: &KvmStreams,
    p: &KvmParamVars,
    cfg: &KvmConfig,
    stateful: bool,
) -> Result<(Var, Option<KvmState<T>>)> {
    let (_, t, dh) = head_dims(g, s)?;
    cfg.validate(dh)?;
    let kt = scale_heads(g, s.k, p.tau_bswa)?;
    let l0 = t.min(cfg.window());
    let (q0, k0, v0) = (g.slice_rows(s.q, 0, l0)?, g.slice_rows(kt, 0, l0)?, g.slice_rows(s.v, 0, l0)?);
    let mut outs = vec![attend(g, q0, k0, v0, &causal_mask(l0))?];

    let plans = chunk_plans(t, cfg);
    let mut rec = match plans.last() {
        Some(last) if stateful => Some(Recurrence::new(g, s.k, s.v, s.x, p, cfg, last.window_start)?),
        _ => None,
    };
    for plan in &plans {
        let qc = g.slice_rows(s.q, plan.start, plan.end)?;
        let kw = g.slice_rows(kt, plan.window_start, plan.end)?;
        let vw = g.slice_rows(s.v, plan.window_start, plan.end)?;
        let out = if let Some(rec) = rec.as_mut() {
            rec.step(g, plan)?;
            let (ks, vs) = rec.views(g)?;
            let keys = g.concat_rows(&[ks, kw])?;
            let values = g.concat_rows(&[vs, vw])?;
            let mask = build_mask(plan.start, plan.end, rec.rows(), plan.window_start);
            attend(g, qc, keys, values, &mask)?
        } else {
            attend(g, qc, kw, vw, &build_mask(plan.start, plan.end, 0, plan.window_start))?
        };
        outs.push(out);
    }
    let out = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
    Ok((out, rec.and_then(|r| r.state(g))))
}

/// KVM attention over whole streams: exact causal warm-up, then one chunk at
/// a time against the state and the block sliding window. Returns `[H, T,
/// d_h]` outputs and the final state.
pub fn kvm_forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    streams: &KvmStreams,
    params: &KvmParamVars,
    cfg: &KvmConfig,
) -> Result<(Var, Option<KvmState<T>>)> {
    chunked(g, streams, params, cfg, true)
}

/// Block sliding-window attention: the KVM chunk schedule with no state.
pub fn windowed_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    streams: &KvmStreams,
    params: &KvmParamVars,
    cfg: &KvmConfig,
) -> Result<Var> {
    Ok(chunked(g, streams, params, cfg, false)?.0)
}

/// Tensor-level [`kvm_forward_graph`] with constant parameters.
pub fn kvm_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    x: &Tensor<T>,
    params: &KvmLayerParams<T>,
    cfg: &KvmConfig,
) -> Result<KvmForwardOutput<T>> {
    let mut g = Graph::new();
    let streams = KvmStreams {
        q: g.constant(q.clone()),
        k: g.constant(k.clone()),
        v: g.constant(v.clone()),
        x: g.constant(x.clone()),
    };
    if q.shape().first() != Some(&params.heads()) {
        return dim_err("kvm_forward", format!("{} parameter heads for queries {:?}", params.heads(), q.shape()));
    }
    let p = params.constants(&mut g, &cfg.ablations);
    let (out, state) = kvm_forward_graph(&mut g, &streams, &p, cfg)?;
    Ok(KvmForwardOutput {
        output: g.value(out).clone(),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvm::StateSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(h: usize, t: usize, dh: usize, d: usize, seed: u64) -> [Tensor<f64>; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            Tensor::randn([h, t, dh], 1.0, &mut rng),
            Tensor::randn([h, t, dh], 1.0, &mut rng),
            Tensor::randn([h, t, dh], 1.0, &mut rng),
            Tensor::randn([t, d], 1.0, &mut rng),
        ]
    }

    fn cfg(c: usize, nb: usize, schedule: StateSchedule) -> KvmConfig {
        KvmConfig {
            chunk_len: c,
            n_bswa_chunks: nb,
            rotary_width: 2,
            schedule,
            ..KvmConfig::default()
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = KvmLayerParams::<f64>::init(4, 1, 4);
        let z = Tensor::zeros([1, 0, 4]);
        assert!(kvm_forward(&z, &z, &z, &Tensor::zeros([0, 4]), &p, &cfg(2, 2, StateSchedule::Unbounded)).is_err());
    }

    #[test]
    fn single_token_returns_its_value() {
        let [q, k, v, x] = inputs(2, 1, 4, 6, 1);
        let p = KvmLayerParams::init(6, 2, 4);
        let out = kvm_forward(&q, &k, &v, &x, &p, &cfg(2, 2, StateSchedule::sqrt())).unwrap();
        assert!(out.output.max_abs_diff(&v).unwrap() < 1e-15);
        assert!(out.state.is_none());
    }

    #[test]
    fn fixed_schedule_keeps_one_chunk() {
        let [q, k, v, x] = inputs(2, 40, 4, 6, 2);
        let p = KvmLayerParams::init(6, 2, 4);
        let c = cfg(3, 2, StateSchedule::Fixed { size: 3 });
        let out = kvm_forward(&q, &k, &v, &x, &p, &c).unwrap();
        assert_eq!(out.state.unwrap().rows(), 3);
    }

    #[test]
    fn unbounded_schedule_appends_everything() {
        let [q, k, v, x] = inputs(1, 20, 4, 3, 3);
        let p = KvmLayerParams::init(3, 1, 4);
        let out = kvm_forward(&q, &k, &v, &x, &p, &cfg(2, 2, StateSchedule::Unbounded)).unwrap();
        // chunks start at 4, 6, .., 18: one init plus seven evictions of two rows
        assert_eq!(out.state.unwrap().rows(), 2 + 7 * 2);
    }

    #[test]
    fn runs_are_bit_identical() {
        let [q, k, v, x] = inputs(2, 23, 4, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = KvmLayerParams::random(5, 2, 4, &mut rng);
        let c = cfg(3, 1, StateSchedule::sqrt());
        let a = kvm_forward(&q, &k, &v, &x, &p, &c).unwrap();
        let b = kvm_forward(&q, &k, &v, &x, &p, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bswa_sees_only_the_window() {
        // Perturbing a value outside every window leaves later outputs alone.
        let [q, k, v, x] = inputs(1, 12, 4, 3, 5);
        let mut g = Graph::new();
        let c = cfg(2, 2, StateSchedule::sqrt());
        let p = KvmLayerParams::<f64>::init(3, 1, 4).constants(&mut g, &c.ablations);
        let run = |g: &mut Graph<f64>, v: &Tensor<f64>| {
            let s = KvmStreams {
                q: g.constant(q.clone()),
                k: g.constant(k.clone()),
                v: g.constant(v.clone()),
                x: g.constant(x.clone()),
            };
            let out = windowed_attention_graph(g, &s, &p, &c).unwrap();
            g.value(out).clone()
        };
        let base = run(&mut g, &v);
        let mut v2 = v.clone();
        v2.data_mut()[0] += 10.0;
        let moved = run(&mut g, &v2);
        // position 0 leaves the window once the chunk starting at 4 attends
        for u in 0..12 {
            let diff = (base.row(u)[0] - moved.row(u)[0]).abs();
            assert_eq!(diff > 0.0, u < 4, "u={u}");
        }
    }
}
