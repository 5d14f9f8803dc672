use crate::error::{dim_err, Result};
use crate::kvm::forward::{attend, head_dims};
use crate::kvm::recurrence::{scale_heads, Recurrence};
use crate::kvm::{chunk_plans, KvmConfig, KvmLayerParams, KvmParamVars, KvmStreams};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrefill<T> {
    /// `[H, T, d_h]`
    pub output: Tensor<T>,
    /// State rows per head held across all chunk snapshots.
    pub snapshot_rows: usize,
}

/// All chunk outputs from a single masked attention call.
///
/// The recurrence runs first without attending and records the readout views
/// of every chunk. Keys are then the concatenation of those snapshots and the
/// whole key stream; each query sees its own chunk's snapshot plus the causal
/// part of its window. Returns the outputs and the snapshot row count.
pub fn fused_prefill_graph<T: Scalar>(
    g: &mut Graph<T>,
    s: &KvmStreams,
    p: &KvmParamVars,
    cfg: &KvmConfig,
) -> Result<(Var, usize)> {
    let (_, t, dh) = head_dims(g, s)?;
    cfg.validate(dh)?;
    let plans = chunk_plans(t, cfg);
    let mut snap_k = Vec::with_capacity(plans.len() + 1);
    let mut snap_v = Vec::with_capacity(plans.len() + 1);
    let mut spans = Vec::with_capacity(plans.len());
    let mut offset = 0;
    if let Some(last) = plans.last() {
        let mut rec = Recurrence::new(g, s.k, s.v, s.x, p, cfg, last.window_start)?;
        for plan in &plans {
            rec.step(g, plan)?;
            let (ks, vs) = rec.views(g)?;
            snap_k.push(ks);
            snap_v.push(vs);
            spans.push(offset..offset + rec.rows());
            offset += rec.rows();
        }
    }
    let kt = scale_heads(g, s.k, p.tau_bswa)?;
    snap_k.push(kt);
    snap_v.push(s.v);
    let keys = g.concat_rows(&snap_k)?;
    let values = g.concat_rows(&snap_v)?;

    let (c, l) = (cfg.chunk_len, cfg.window());
    let cols = offset + t;
    let mask = Tensor::from_fn([t, cols], |i| {
        let (u, col) = (i / cols, i % cols);
        let visible = if u < l {
            col >= offset && col - offset <= u
        } else {
            let chunk = (u - l) / c;
            let window_start = (chunk + 1) * c;
            spans[chunk].contains(&col) || (col >= offset && (window_start..=u).contains(&(col - offset)))
        };
        if visible {
            T::zero()
        } else {
            T::neg_infinity()
        }
    });
    Ok((attend(g, s.q, keys, values, &mask)?, offset))
}

/// Tensor-level [`fused_prefill_graph`] with constant parameters.
pub fn fused_prefill<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    x: &Tensor<T>,
    params: &KvmLayerParams<T>,
    cfg: &KvmConfig,
) -> Result<FusedPrefill<T>> {
    if q.shape().first() != Some(&params.heads()) {
        return dim_err("fused_prefill", format!("{} parameter heads for queries {:?}", params.heads(), q.shape()));
    }
    let mut g = Graph::new();
    let streams = KvmStreams {
        q: g.constant(q.clone()),
        k: g.constant(k.clone()),
        v: g.constant(v.clone()),
        x: g.constant(x.clone()),
    };
    let p = params.constants(&mut g, &cfg.ablations);
    let (out, snapshot_rows) = fused_prefill_graph(&mut g, &streams, &p, cfg)?;
    Ok(FusedPrefill {
        output: g.value(out).clone(),
        snapshot_rows,
    })
}
