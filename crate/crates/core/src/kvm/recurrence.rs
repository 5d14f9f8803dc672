//! State lifecycle on the autodiff graph (init, append, merge, readout) plus
//! tensor-level entry points that run the same graph code on constants.

use crate::error::{dim_err, Error, Result};
use crate::kvm::{
    merge_targets, plan_budget, select_append, ChunkPlan, KvmConfig, KvmLayerParams, KvmParamVars, KvmState, StateStep,
    LN_EPS,
};
use crate::numerics::{layer_norm, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// State held as graph nodes during a forward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GraphState {
    pub sk: Var,
    pub sv: Var,
    /// `[H, m, 1]`
    pub rho: Var,
    pub rows: usize,
}

impl GraphState {
    pub fn to_state<T: Scalar>(self, g: &Graph<T>, sinks: usize) -> KvmState<T> {
        let rho = g.value(self.rho).clone();
        let (h, m) = (rho.shape()[0], rho.shape()[1]);
        KvmState {
            sk: g.value(self.sk).clone(),
            sv: g.value(self.sv).clone(),
            rho: rho.reshape([h, m]).expect("rho shape"),
            sinks,
        }
    }

    pub fn from_state<T: Scalar>(g: &mut Graph<T>, state: &KvmState<T>) -> Self {
        GraphState {
            sk: g.constant(state.sk.clone()),
            sv: g.constant(state.sv.clone()),
            rho: g.constant(state.rho_column()),
            rows: state.rows(),
        }
    }
}

/// `LN_s(k * diag(0_r, 1_{d_h - r}))` for `[H, n, d_h]` keys.
pub(crate) fn memory_keys_graph<T: Scalar>(g: &mut Graph<T>, k: Var, p: &KvmParamVars, rotary_width: usize) -> Result<Var> {
    let dh = *g.shape(k).last().unwrap_or(&0);
    let zeroed = if rotary_width > 0 {
        let mask = g.constant(Tensor::from_fn([dh], |c| if c < rotary_width { T::zero() } else { T::one() }));
        g.mul(k, mask)?
    } else {
        k
    };
    state_norm_graph(g, zeroed, p)
}

pub(crate) fn state_norm_graph<T: Scalar>(g: &mut Graph<T>, x: Var, p: &KvmParamVars) -> Result<Var> {
    g.layer_norm(x, p.ln_gain, p.ln_bias, T::of(LN_EPS))
}

/// `1 + ELU(x W_g)` as `[H, n, 1]`, or `None` when the gate is disabled.
pub(crate) fn gate_graph<T: Scalar>(g: &mut Graph<T>, x: Var, p: &KvmParamVars) -> Result<Option<Var>> {
    let Some(w) = p.w_gate else { return Ok(None) };
    let n = g.shape(x)[0];
    let heads = g.shape(w)[1];
    let logits = g.matmul(x, w)?;
    let act = g.elu(logits);
    let gate = g.add_scalar(act, T::one());
    let gate = g.reshape(gate, &[n, heads, 1])?;
    Ok(Some(g.swap_axes01(gate)?))
}

pub(crate) fn init_graph<T: Scalar>(g: &mut Graph<T>, kbar: Var, v: Var) -> GraphState {
    let rho = g.row_norm(v);
    GraphState {
        sk: kbar,
        sv: v,
        rho,
        rows: g.shape(kbar)[1],
    }
}

/// Normalized key view `LN_s(sK)` and value view rescaled to the stored radii.
pub(crate) fn readout_graph<T: Scalar>(g: &mut Graph<T>, st: &GraphState, p: &KvmParamVars, cfg: &KvmConfig) -> Result<(Var, Var)> {
    let keys = state_norm_graph(g, st.sk, p)?;
    let values = if cfg.ablations.value_length_norm {
        let norm = g.row_norm(st.sv);
        let floor = g.clamp_min(norm, T::of(cfg.eps_norm));
        let unit = g.div(st.sv, floor)?;
        g.mul(unit, st.rho)?
    } else {
        st.sv
    };
    Ok((keys, values))
}

/// Appends the selected block rows (`index`: `n` offsets per head, head-major).
pub(crate) fn append_graph<T: Scalar>(g: &mut Graph<T>, st: &GraphState, kbar_block: Var, v_block: Var, index: &[usize]) -> Result<GraphState> {
    let heads = g.shape(st.sk)[0];
    if index.is_empty() {
        return Ok(*st);
    }
    let n = index.len() / heads;
    let ka = g.gather_rows(kbar_block, index)?;
    let va = g.gather_rows(v_block, index)?;
    let ra = g.row_norm(va);
    Ok(GraphState {
        sk: g.concat_rows(&[st.sk, ka])?,
        sv: g.concat_rows(&[st.sv, va])?,
        rho: g.concat_rows(&[st.rho, ra])?,
        rows: st.rows + n,
    })
}

/// Adds gated block rows `rows` into their target state rows.
pub(crate) fn merge_graph<T: Scalar>(
    g: &mut Graph<T>,
    st: &GraphState,
    gk_block: Var,
    gv_block: Var,
    rows: &[usize],
    targets: &[usize],
) -> Result<GraphState> {
    if rows.is_empty() {
        return Ok(*st);
    }
    let kr = g.gather_rows(gk_block, rows)?;
    let vr = g.gather_rows(gv_block, rows)?;
    Ok(GraphState {
        sk: g.index_add_rows(st.sk, kr, targets)?,
        sv: g.index_add_rows(st.sv, vr, targets)?,
        rho: st.rho,
        rows: st.rows,
    })
}

/// Off-graph `LN_s` of the current state keys, used for the discrete
/// selection and merge-target decisions.
fn key_view_value<T: Scalar>(g: &Graph<T>, sk: Var, p: &KvmParamVars) -> Result<Tensor<T>> {
    layer_norm(g.value(sk), g.value(p.ln_gain), g.value(p.ln_bias), T::of(LN_EPS))
}

fn gather_tensor<T: Scalar>(x: &Tensor<T>, index: &[Vec<usize>]) -> Tensor<T> {
    let s = x.shape();
    let (n, d) = (s[1], s[2]);
    let k = index.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(s[0] * k * d);
    for (h, rows) in index.iter().enumerate() {
        for &r in rows {
            data.extend_from_slice(&x.data()[(h * n + r) * d..(h * n + r + 1) * d]);
        }
    }
    Tensor::new([s[0], k, d], data).expect("gather shape")
}

/// Evicts one overflow block into the state: budget, append selection,
/// append, merge-target search and gated merge. `end` is the nominal end of
/// the chunk about to attend.
pub(crate) fn evict_graph<T: Scalar>(
    g: &mut Graph<T>,
    st: &GraphState,
    kbar: Var,
    v: Var,
    gate: Option<Var>,
    p: &KvmParamVars,
    cfg: &KvmConfig,
    end: usize,
) -> Result<GraphState> {
    let c = g.shape(kbar)[1];
    let n_append = plan_budget(&cfg.schedule, end, st.rows, c);
    let split = if n_append == 0 || n_append == c {
        let heads = g.shape(kbar)[0];
        let all: Vec<usize> = (0..c).collect();
        let (a, m) = if n_append == 0 { (vec![], all) } else { (all, vec![]) };
        crate::kvm::AppendSplit {
            append: vec![a; heads],
            merge: vec![m; heads],
        }
    } else {
        let view = key_view_value(g, st.sk, p)?;
        select_append(g.value(kbar), &view, n_append)?
    };
    let st = append_graph(g, st, kbar, v, &split.append_flat())?;
    if split.merge.iter().all(Vec::is_empty) {
        return Ok(st);
    }
    let view = key_view_value(g, st.sk, p)?;
    let merging = gather_tensor(g.value(kbar), &split.merge);
    let targets = merge_targets(&merging, &view, cfg.protected_sinks())?;
    let (gk, gv) = match gate {
        Some(gt) => (g.mul(kbar, gt)?, g.mul(v, gt)?),
        None => (kbar, v),
    };
    merge_graph(g, &st, gk, gv, &split.merge_flat(), &targets.concat())
}

/// Chunk recurrence over whole `[H, T, d_h]` key/value streams.
pub(crate) struct Recurrence<'a> {
    cfg: &'a KvmConfig,
    params: KvmParamVars,
    kbar: Var,
    v: Var,
    gate: Option<Var>,
    state: Option<GraphState>,
}

impl<'a> Recurrence<'a> {
    /// Prepares memory keys and gates for positions `[0, rows)`.
    pub fn new<T: Scalar>(g: &mut Graph<T>, k: Var, v: Var, x: Var, params: &KvmParamVars, cfg: &'a KvmConfig, rows: usize) -> Result<Self> {
        let k = g.slice_rows(k, 0, rows)?;
        let kbar = memory_keys_graph(g, k, params, cfg.rotary_width)?;
        let x = g.slice_rows(x, 0, rows)?;
        let gate = gate_graph(g, x, params)?;
        let v = g.slice_rows(v, 0, rows)?;
        Ok(Self {
            cfg,
            params: *params,
            kbar,
            v,
            gate,
            state: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.state.map_or(0, |s| s.rows)
    }

    pub fn state<T: Scalar>(&self, g: &Graph<T>) -> Option<KvmState<T>> {
        self.state.map(|s| s.to_state(g, self.cfg.protected_sinks()))
    }

    /// Brings the state up to date for `plan`'s chunk.
    pub fn step<T: Scalar>(&mut self, g: &mut Graph<T>, plan: &ChunkPlan) -> Result<()> {
        match (&plan.step, self.state) {
            (StateStep::Init(r), _) => {
                let k = g.slice_rows(self.kbar, r.start, r.end)?;
                let v = g.slice_rows(self.v, r.start, r.end)?;
                self.state = Some(init_graph(g, k, v));
            }
            (StateStep::Evict(r), Some(st)) => {
                let k = g.slice_rows(self.kbar, r.start, r.end)?;
                let v = g.slice_rows(self.v, r.start, r.end)?;
                let gate = match self.gate {
                    Some(gt) => Some(g.slice_rows(gt, r.start, r.end)?),
                    None => None,
                };
                self.state = Some(evict_graph(g, &st, k, v, gate, &self.params, self.cfg, plan.nominal_end)?);
            }
            (StateStep::Evict(_), None) => return Err(Error::Invalid("eviction before state initialization".into())),
        }
        Ok(())
    }

    /// Readout views with the state temperature applied to the keys.
    pub fn views<T: Scalar>(&self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let st = self.state.ok_or_else(|| Error::Invalid("readout before state initialization".into()))?;
        let (k, v) = readout_graph(g, &st, &self.params, self.cfg)?;
        Ok((scale_heads(g, k, self.params.tau_state)?, v))
    }
}

/// Multiplies `[H, n, d_h]` rows by a per-head `[H, 1, 1]` factor, if any.
pub(crate) fn scale_heads<T: Scalar>(g: &mut Graph<T>, x: Var, tau: Option<Var>) -> Result<Var> {
    match tau {
        Some(t) => g.mul(x, t),
        None => Ok(x),
    }
}

fn check_rows<T: Scalar>(op: &'static str, t: &Tensor<T>, heads: usize, dh: usize) -> Result<usize> {
    let s = t.shape();
    if s.len() != 3 || s[0] != heads || s[2] != dh {
        return dim_err(op, format!("expected [{heads}, n, {dh}], got {s:?}"));
    }
    Ok(s[1])
}

/// Memory keys for `[H, n, d_h]` keys that were already rotated by the backbone.
pub fn prepare_memory_key<T: Scalar>(k: &Tensor<T>, params: &KvmLayerParams<T>, rotary_width: usize) -> Result<Tensor<T>> {
    check_rows("prepare_memory_key", k, params.heads(), params.head_dim())?;
    let mut g = Graph::new();
    let kv = g.constant(k.clone());
    let p = params.constants(&mut g, &Default::default());
    let out = memory_keys_graph(&mut g, kv, &p, rotary_width)?;
    Ok(g.value(out).clone())
}

/// Merge gates `[H, n, 1]` for the `[n, d]` block inputs.
pub fn merge_gate<T: Scalar>(x: &Tensor<T>, params: &KvmLayerParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.constants(&mut g, &Default::default());
    let gate = gate_graph(&mut g, xv, &p)?.expect("gate enabled");
    Ok(g.value(gate).clone())
}

/// State from the first chunk's memory keys and ungated values (`[H, C, d_h]`).
pub fn init_state<T: Scalar>(memory_keys: &Tensor<T>, values: &Tensor<T>, cfg: &KvmConfig) -> Result<KvmState<T>> {
    let s = memory_keys.shape();
    if s.len() != 3 || values.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "init_state",
            lhs: s.to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    if s[1] != cfg.chunk_len {
        return dim_err("init_state", format!("expected {} rows, got {}", cfg.chunk_len, s[1]));
    }
    let mut g = Graph::new();
    let (kv, vv) = (g.constant(memory_keys.clone()), g.constant(values.clone()));
    Ok(init_graph(&mut g, kv, vv).to_state(&g, cfg.protected_sinks()))
}

/// Transient normalized views `(key view, value view)`, both `[H, m, d_h]`.
pub fn readout_views<T: Scalar>(state: &KvmState<T>, params: &KvmLayerParams<T>, cfg: &KvmConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let st = GraphState::from_state(&mut g, state);
    let p = params.constants(&mut g, &cfg.ablations);
    let (k, v) = readout_graph(&mut g, &st, &p, cfg)?;
    Ok((g.value(k).clone(), g.value(v).clone()))
}

/// Appends `[H, n, d_h]` memory keys and ungated values as new rows.
pub fn append_rows<T: Scalar>(state: &KvmState<T>, memory_keys: &Tensor<T>, values: &Tensor<T>) -> Result<KvmState<T>> {
    let (heads, dh) = (state.heads(), state.head_dim());
    let n = check_rows("append_rows", memory_keys, heads, dh)?;
    if check_rows("append_rows", values, heads, dh)? != n {
        return Err(Error::ShapeMismatch {
            op: "append_rows",
            lhs: memory_keys.shape().to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    if n == 0 {
        return Ok(state.clone());
    }
    let mut g = Graph::new();
    let st = GraphState::from_state(&mut g, state);
    let (kv, vv) = (g.constant(memory_keys.clone()), g.constant(values.clone()));
    let index: Vec<usize> = (0..heads).flat_map(|_| 0..n).collect();
    Ok(append_graph(&mut g, &st, kv, vv, &index)?.to_state(&g, state.sinks))
}

/// Adds gated keys/values (`[H, k, d_h]`) into rows `targets[h][j]`.
pub fn merge_rows<T: Scalar>(
    state: &KvmState<T>,
    gated_keys: &Tensor<T>,
    gated_values: &Tensor<T>,
    targets: &[Vec<usize>],
) -> Result<KvmState<T>> {
    let (heads, dh) = (state.heads(), state.head_dim());
    let k = check_rows("merge_rows", gated_keys, heads, dh)?;
    check_rows("merge_rows", gated_values, heads, dh)?;
    if targets.len() != heads || targets.iter().any(|t| t.len() != k) {
        return dim_err("merge_rows", "one target per merged row and head required");
    }
    for &t in targets.iter().flatten() {
        if t >= state.rows() || t < state.sinks {
            return Err(Error::InvalidMergeTarget {
                target: t,
                rows: state.rows(),
                sinks: state.sinks,
            });
        }
    }
    if k == 0 {
        return Ok(state.clone());
    }
    let mut g = Graph::new();
    let st = GraphState::from_state(&mut g, state);
    let (kv, vv) = (g.constant(gated_keys.clone()), g.constant(gated_values.clone()));
    let rows: Vec<usize> = (0..heads).flat_map(|_| 0..k).collect();
    Ok(merge_graph(&mut g, &st, kv, vv, &rows, &targets.concat())?.to_state(&g, state.sinks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rope_partial;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize) -> KvmConfig {
        KvmConfig {
            chunk_len: c,
            rotary_width: 2,
            ..KvmConfig::default()
        }
    }

    #[test]
    fn full_rotary_width_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KvmLayerParams::<f64>::random(4, 2, 4, &mut rng);
        let k = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let out = prepare_memory_key(&k, &p, 4).unwrap();
        for h in 0..2 {
            for t in 0..3 {
                assert_eq!(&out.data()[(h * 3 + t) * 4..(h * 3 + t + 1) * 4], &p.ln_bias.data()[h * 4..(h + 1) * 4]);
            }
        }
    }

    #[test]
    fn memory_keys_ignore_rope_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = KvmLayerParams::<f64>::random(4, 1, 8, &mut rng);
        let k = Tensor::randn([1, 1, 8], 1.0, &mut rng);
        let at5 = rope_partial(&k, 5, 4, 10_000.0).unwrap();
        let at500 = rope_partial(&k, 500, 4, 10_000.0).unwrap();
        let a = prepare_memory_key(&at5, &p, 4).unwrap();
        let b = prepare_memory_key(&at500, &p, 4).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn gate_goldens() {
        let mut p = KvmLayerParams::<f64>::init(1, 3, 2);
        p.w_gate = Tensor::from_f64([1, 3], &[0.0, 3.0, -1.0]).unwrap();
        let gate = merge_gate(&Tensor::from_f64([1, 1], &[1.0]).unwrap(), &p).unwrap();
        assert_eq!(gate.shape(), &[3, 1, 1]);
        assert_eq!(gate.data()[0], 1.0);
        assert_eq!(gate.data()[1], 4.0);
        assert!((gate.data()[2] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn init_sets_radii() {
        let k = Tensor::<f64>::zeros([1, 3, 2]);
        let v = Tensor::from_f64([1, 3, 2], &[3., 4., 0., 0., 1., 0.]).unwrap();
        let s = init_state(&k, &v, &cfg(3)).unwrap();
        assert_eq!(s.rows(), 3);
        assert_eq!(s.radii().data(), &[5.0, 0.0, 1.0]);
        assert!(init_state(&k, &v, &cfg(4)).is_err());
    }

    #[test]
    fn readout_goldens() {
        let p = KvmLayerParams::<f64>::init(1, 1, 2);
        let state = |sv: [f64; 2]| {
            KvmState::new(
                Tensor::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap(),
                Tensor::from_f64([1, 1, 2], &sv).unwrap(),
                Tensor::from_f64([1, 1], &[5.0]).unwrap(),
                0,
            )
            .unwrap()
        };
        let c = cfg(3);
        let (_, v) = readout_views(&state([3.0, 4.0]), &p, &c).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0]);
        let (_, v) = readout_views(&state([6.0, 8.0]), &p, &c).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0]);
        let (_, v) = readout_views(&state([0.0, 0.0]), &p, &c).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
        let mut off = c.clone();
        off.ablations.value_length_norm = false;
        let (_, v) = readout_views(&state([6.0, 8.0]), &p, &off).unwrap();
        assert_eq!(v.data(), &[6.0, 8.0]);
    }

    #[test]
    fn append_and_merge_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = KvmState::new(
            Tensor::<f64>::randn([1, 5, 2], 1.0, &mut rng),
            Tensor::randn([1, 5, 2], 1.0, &mut rng),
            Tensor::uniform([1, 5], 0.5, 1.5, &mut rng),
            1,
        )
        .unwrap();
        let same = append_rows(&s, &Tensor::zeros([1, 0, 2]), &Tensor::zeros([1, 0, 2])).unwrap();
        assert_eq!(same, s);
        let k = Tensor::randn([1, 2, 2], 1.0, &mut rng);
        let v = Tensor::from_f64([1, 2, 2], &[0.0, 2.0, 1.0, 0.0]).unwrap();
        let grown = append_rows(&s, &k, &v).unwrap();
        assert_eq!(grown.rows(), 7);
        assert_eq!(&grown.radii().data()[5..], &[2.0, 1.0]);
        assert_eq!(&grown.radii().data()[..5], s.radii().data());

        let unchanged = merge_rows(&grown, &Tensor::zeros([1, 0, 2]), &Tensor::zeros([1, 0, 2]), &[vec![]]).unwrap();
        assert_eq!(unchanged, grown);
        let gk = Tensor::from_f64([1, 1, 2], &[0.25, -1.0]).unwrap();
        let merged = merge_rows(&grown, &gk, &gk, &[vec![3]]).unwrap();
        assert_eq!(merged.keys().row(3), &[grown.keys().row(3)[0] + 0.25, grown.keys().row(3)[1] - 1.0]);
        assert_eq!(merged.radii(), grown.radii());
        assert!(matches!(
            merge_rows(&grown, &gk, &gk, &[vec![0]]),
            Err(Error::InvalidMergeTarget { target: 0, .. })
        ));
        assert!(merge_rows(&grown, &gk, &gk, &[vec![7]]).is_err());
    }
}
