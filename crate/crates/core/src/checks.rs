//! Correctness checks shared by the test suite and the `check` command:
//! oracle agreement over a configuration matrix, state invariants and
//! gradient checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{AttentionMode, GptAlpha, GptAlphaConfig};
use crate::error::Result;
use crate::kvm::{
    build_mask, fused_prefill, kvm_forward, merge_targets, readout_views, Ablations, KvmConfig, KvmDecoder, KvmLayerParams,
    StateSchedule,
};
use crate::numerics::Tensor;
use crate::oracle::{brute_force_merge_assign, exact_causal_attention, naive_kvm_forward, OracleReport};
use crate::training::grad_check;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckLevel {
    Fast,
    Full,
}

/// `(start, end, state_rows, window_start) -> [end - start, state_rows + end - window_start]`
pub type MaskFn = fn(usize, usize, usize, usize) -> Tensor<f64>;

/// What the checks run against. Tests swap in deliberately broken pieces to
/// confirm the checks catch them.
#[derive(Clone, Copy)]
pub struct CheckTargets {
    pub mask: MaskFn,
}

impl Default for CheckTargets {
    fn default() -> Self {
        Self { mask: build_mask::<f64> }
    }
}

/// One row of the check report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub cases: usize,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} cases={} max_abs={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.cases,
            self.max_abs,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Accumulates per-case reports into one row.
struct Tally {
    row: CheckRow,
}

impl Tally {
    fn new(check: &str, tolerance: f64) -> Self {
        Self {
            row: CheckRow {
                check: check.to_string(),
                cases: 0,
                max_abs: 0.0,
                tolerance,
                pass: true,
                detail: String::new(),
            },
        }
    }

    fn add(&mut self, report: &OracleReport, case: impl FnOnce() -> String) {
        self.row.cases += 1;
        self.row.max_abs = self.row.max_abs.max(report.max_abs);
        if !report.pass && self.row.pass {
            self.row.pass = false;
            self.row.detail = format!("first failure: {} ({report})", case());
        }
    }

    fn fail(&mut self, why: String) {
        self.row.cases += 1;
        if self.row.pass {
            self.row.pass = false;
            self.row.detail = why;
        }
    }

    fn done(self) -> CheckRow {
        self.row
    }
}

/// One point of the oracle test matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCase {
    pub chunk_len: usize,
    pub n_bswa_chunks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub schedule: StateSchedule,
    pub ablations: Ablations,
}

impl MatrixCase {
    pub fn config(&self) -> KvmConfig {
        KvmConfig {
            chunk_len: self.chunk_len,
            n_bswa_chunks: self.n_bswa_chunks,
            rotary_width: 2,
            sink_count: 1,
            schedule: self.schedule.clone(),
            ablations: self.ablations,
            ..KvmConfig::default()
        }
    }

    fn label(&self) -> String {
        format!(
            "C={} nb={} H={} dh={} T={} {} {:?}",
            self.chunk_len,
            self.n_bswa_chunks,
            self.heads,
            self.head_dim,
            self.seq_len,
            self.schedule.label(),
            self.ablations
        )
    }
}

/// Fixed, power-law and saturating budgets scaled so that sequences of at
/// most 64 tokens already append and merge.
pub fn matrix_schedules(chunk_len: usize) -> [StateSchedule; 3] {
    [
        StateSchedule::Fixed { size: chunk_len },
        StateSchedule::PowerLaw {
            coefficient: 2.0,
            exponent: 0.5,
        },
        StateSchedule::Saturating {
            cap: 2 * chunk_len + 1,
            coefficient: 2.0,
            exponent: 0.5,
        },
    ]
}

/// Sequence lengths `{1, C - 1, L, L + 1, L + 3C, 64}` without duplicates.
pub fn matrix_lengths(c: usize, nb: usize) -> Vec<usize> {
    let l = c * nb;
    let mut t = vec![1, c - 1, l, l + 1, l + 3 * c, 64];
    t.retain(|&x| x > 0);
    t.sort_unstable();
    t.dedup();
    t
}

pub fn matrix(level: CheckLevel) -> Vec<MatrixCase> {
    let full = level == CheckLevel::Full;
    let chunks: &[usize] = if full { &[2, 3, 4] } else { &[2, 3] };
    let nbs: &[usize] = if full { &[1, 2, 3] } else { &[1, 2] };
    let heads: &[usize] = if full { &[1, 2, 4] } else { &[1, 2] };
    let dims: &[usize] = if full { &[4, 8] } else { &[4] };
    let all = Ablations::all_combinations();
    let ablations: Vec<Ablations> = if full {
        all
    } else {
        vec![all[0], all[15], all[11], all[13]]
    };
    let mut cases = Vec::new();
    for &c in chunks {
        for &nb in nbs {
            for &h in heads {
                for &dh in dims {
                    for t in matrix_lengths(c, nb) {
                        for schedule in matrix_schedules(c) {
                            for &ab in &ablations {
                                cases.push(MatrixCase {
                                    chunk_len: c,
                                    n_bswa_chunks: nb,
                                    heads: h,
                                    head_dim: dh,
                                    seq_len: t,
                                    schedule: schedule.clone(),
                                    ablations: ab,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    cases
}

/// Random streams `q, k, v: [H, T, d_h]`, block inputs `x: [T, d]` and
/// non-neutral layer parameters.
pub struct CaseInputs {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub x: Tensor<f64>,
    pub params: KvmLayerParams<f64>,
}

const CASE_D_MODEL: usize = 6;

pub fn case_inputs(case: &MatrixCase, seed: u64) -> CaseInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [case.heads, case.seq_len, case.head_dim];
    CaseInputs {
        q: Tensor::randn(shape, 1.0, &mut rng),
        k: Tensor::randn(shape, 1.0, &mut rng),
        v: Tensor::randn(shape, 1.0, &mut rng),
        x: Tensor::randn([case.seq_len, CASE_D_MODEL], 1.0, &mut rng),
        params: KvmLayerParams::random(CASE_D_MODEL, case.heads, case.head_dim, &mut rng),
    }
}

/// Rows `[u, u + 1)` of every head.
fn token(t: &Tensor<f64>, u: usize) -> Tensor<f64> {
    let (h, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn([h, 1, d], |i| t.data()[((i / d) * n + u) * d + i % d])
}

fn x_row(x: &Tensor<f64>, u: usize) -> Tensor<f64> {
    let d = x.shape()[1];
    Tensor::new([1, d], x.data()[u * d..(u + 1) * d].to_vec()).expect("row")
}

/// Concatenates `[H, 1, d_h]` step outputs along the time axis.
fn stack(steps: &[Tensor<f64>], heads: usize, dh: usize) -> Tensor<f64> {
    let n = steps.len();
    Tensor::from_fn([heads, n, dh], |i| {
        let (h, rest) = (i / (n * dh), i % (n * dh));
        steps[rest / dh].data()[h * dh + rest % dh]
    })
}

/// Output agreement for every case: the chunked forward against the
/// per-token oracle, fused prefill and token-by-token decoding against the
/// chunked forward.
pub fn check_equivalences(level: CheckLevel) -> Result<Vec<CheckRow>> {
    let mut forward = Tally::new("kvm_forward", 1e-10);
    let mut fused = Tally::new("fused_prefill", 1e-12);
    let mut decode = Tally::new("decode_step", 1e-10);
    for (i, case) in matrix(level).iter().enumerate() {
        let cfg = case.config();
        let inp = case_inputs(case, i as u64);
        let fast = kvm_forward(&inp.q, &inp.k, &inp.v, &inp.x, &inp.params, &cfg)?;
        let naive = naive_kvm_forward(&inp.q, &inp.k, &inp.v, &inp.x, &inp.params, &cfg)?;
        forward.add(&OracleReport::compare(&naive.output, &fast.output, 1e-10), || case.label());
        match (&naive.state, &fast.state) {
            (Some(a), Some(b)) => {
                forward.add(&OracleReport::compare(a.keys(), b.keys(), 1e-10), || format!("state keys, {}", case.label()));
                if a.radii() != b.radii() {
                    forward.fail(format!("state radii differ, {}", case.label()));
                }
            }
            (None, None) => {}
            _ => forward.fail(format!("state presence differs, {}", case.label())),
        }
        let f = fused_prefill(&inp.q, &inp.k, &inp.v, &inp.x, &inp.params, &cfg)?;
        fused.add(&OracleReport::compare(&fast.output, &f.output, 1e-12), || case.label());
        let mut dec = KvmDecoder::kvm(cfg.clone());
        let steps = (0..case.seq_len)
            .map(|u| dec.step(&token(&inp.q, u), &token(&inp.k, u), &token(&inp.v, u), &x_row(&inp.x, u), &inp.params))
            .collect::<Result<Vec<_>>>()?;
        let stepped = stack(&steps, case.heads, case.head_dim);
        decode.add(&OracleReport::compare(&fast.output, &stepped, 1e-10), || case.label());
    }
    Ok(vec![forward.done(), fused.done(), decode.done()])
}

/// For `T <= L` the output is plain causal attention with window
/// temperatures.
pub fn check_warm_up(level: CheckLevel) -> Result<CheckRow> {
    let mut tally = Tally::new("warm_up", 1e-12);
    for (i, case) in matrix(level).iter().enumerate() {
        let cfg = case.config();
        if case.seq_len > cfg.window() {
            continue;
        }
        let inp = case_inputs(case, i as u64);
        let fast = kvm_forward(&inp.q, &inp.k, &inp.v, &inp.x, &inp.params, &cfg)?;
        let temps: Vec<f64> = if case.ablations.head_temperatures {
            inp.params.tau_bswa.data().to_vec()
        } else {
            vec![1.0; case.heads]
        };
        let exact = exact_causal_attention(&inp.q, &inp.k, &inp.v, &temps)?;
        tally.add(&OracleReport::compare(&exact, &fast.output, 1e-12), || case.label());
        if fast.state.is_some() {
            tally.fail(format!("state created during warm-up, {}", case.label()));
        }
    }
    Ok(tally.done())
}

/// Mask entries spelled out from visibility: query `u` sees every state row
/// and window positions `window_start..=u`.
fn reference_mask(start: usize, end: usize, state_rows: usize, window_start: usize) -> Vec<bool> {
    let mut visible = Vec::new();
    for u in start..end {
        for _ in 0..state_rows {
            visible.push(true);
        }
        for p in window_start..end {
            visible.push(p <= u);
        }
    }
    visible
}

pub fn check_mask(level: CheckLevel, targets: &CheckTargets) -> CheckRow {
    let mut tally = Tally::new("build_mask", 0.0);
    let limit = if level == CheckLevel::Full { 12 } else { 6 };
    for c in 1..=4 {
        for l in (c..=3 * c).step_by(c) {
            for chunk in 0..limit {
                let start = l + chunk * c;
                let window_start = start + c - l;
                for end in start + 1..=start + c {
                    for rows in [0, 1, 5] {
                        let got = (targets.mask)(start, end, rows, window_start);
                        let want = reference_mask(start, end, rows, window_start);
                        let cols = rows + end - window_start;
                        let label = || format!("start={start} end={end} rows={rows} window_start={window_start}");
                        if got.shape() != [end - start, cols] {
                            tally.fail(format!("shape {:?}, {}", got.shape(), label()));
                            continue;
                        }
                        let ok = got.data().iter().zip(&want).all(|(&m, &vis)| if vis { m == 0.0 } else { m == f64::NEG_INFINITY });
                        tally.row.cases += 1;
                        if !ok && tally.row.pass {
                            tally.row.pass = false;
                            tally.row.max_abs = f64::INFINITY;
                            tally.row.detail = format!("visibility differs at {}", label());
                        }
                    }
                }
            }
        }
    }
    tally.done()
}

pub fn check_merge_targets(level: CheckLevel) -> Result<CheckRow> {
    let mut tally = Tally::new("merge_targets", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let trials = if level == CheckLevel::Full { 2000 } else { 200 };
    for trial in 0..trials {
        let (h, k, m, dh) = (rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=12), [4, 8][trial % 2]);
        let sinks = rng.gen_range(0..m);
        let keys = Tensor::<f64>::randn([h, k, dh], 1.0, &mut rng);
        let view = Tensor::<f64>::randn([h, m, dh], 1.0, &mut rng);
        tally.row.cases += 1;
        if merge_targets(&keys, &view, sinks)? != brute_force_merge_assign(&keys, &view, sinks) {
            tally.fail(format!("trial {trial}: H={h} k={k} m={m} sinks={sinks}"));
        }
    }
    Ok(tally.done())
}

/// Positive rescaling of a merged key never changes its target.
pub fn check_merge_scale_invariance(trials: usize, seed: u64) -> Result<CheckRow> {
    let mut tally = Tally::new("merge_scale_invariance", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for trial in 0..trials {
        let (h, k, m, dh) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(2..=16), [4, 8][trial % 2]);
        let sinks = rng.gen_range(0..2.min(m));
        let keys = Tensor::<f64>::randn([h, k, dh], 1.0, &mut rng);
        let view = Tensor::<f64>::randn([h, m, dh], 1.0, &mut rng);
        let before = merge_targets(&keys, &view, sinks)?;
        let (hh, j) = (rng.gen_range(0..h), rng.gen_range(0..k));
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let mut data = keys.data().to_vec();
        for c in 0..dh {
            data[(hh * k + j) * dh + c] *= scale;
        }
        let after = merge_targets(&Tensor::new([h, k, dh], data)?, &view, sinks)?;
        tally.row.cases += 1;
        if before != after {
            violations += 1;
            tally.row.pass = false;
        }
    }
    tally.row.detail = format!("violations={violations}");
    Ok(tally.done())
}

/// Counters from [`check_state_invariants`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantStats {
    pub recurrence_steps: usize,
    pub merges_seen: usize,
    pub worst_norm_error: f64,
    pub failures: Vec<String>,
}

/// Decodes random sequences and inspects the state after every recurrence
/// step: radii of existing rows never change, readout values have norm
/// `rho`, the sink row is never merged into, and the row count grows
/// monotonically within the budget.
pub fn check_state_invariants(min_steps: usize, seed: u64) -> Result<(CheckRow, InvariantStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = InvariantStats::default();
    let mut seq = 0;
    while stats.recurrence_steps < min_steps {
        seq += 1;
        let c = rng.gen_range(2..=4);
        let nb = rng.gen_range(1..=2);
        let (heads, dh) = (rng.gen_range(1..=2), [4, 8][rng.gen_range(0..2)]);
        let schedule = match rng.gen_range(0..3) {
            0 => StateSchedule::Fixed { size: c + rng.gen_range(0..3) },
            1 => StateSchedule::PowerLaw {
                coefficient: rng.gen_range(1.0..3.0),
                exponent: 0.5,
            },
            _ => StateSchedule::Saturating {
                cap: 2 * c,
                coefficient: 2.0,
                exponent: 0.5,
            },
        };
        let cfg = KvmConfig {
            chunk_len: c,
            n_bswa_chunks: nb,
            rotary_width: 2,
            sink_count: 1,
            schedule,
            ablations: Ablations {
                head_temperatures: rng.gen(),
                merge_gate: rng.gen(),
                ..Ablations::default()
            },
            ..KvmConfig::default()
        };
        let t = cfg.window() + c * rng.gen_range(8..24);
        let case = MatrixCase {
            chunk_len: c,
            n_bswa_chunks: nb,
            heads,
            head_dim: dh,
            seq_len: t,
            schedule: cfg.schedule.clone(),
            ablations: cfg.ablations,
        };
        let inp = case_inputs(&case, 1_000 + seq);
        let mut dec = KvmDecoder::kvm(cfg.clone());
        let mut prev: Option<crate::kvm::KvmState<f64>> = None;
        for u in 0..t {
            dec.step(&token(&inp.q, u), &token(&inp.k, u), &token(&inp.v, u), &x_row(&inp.x, u), &inp.params)?;
            let Some(state) = dec.state() else { continue };
            let stepped = match &prev {
                None => true,
                Some(p) => p != state,
            };
            // The state only changes on chunk boundaries.
            let boundary = u >= cfg.window() && (u - cfg.window()) % c == 0;
            if !boundary {
                if stepped {
                    stats.failures.push(format!("state changed off a chunk boundary at u={u}"));
                }
                continue;
            }
            stats.recurrence_steps += 1;
            let e = u + c;
            let m = state.rows();
            let fail = |what: &str| format!("sequence {seq}, e={e}: {what}");
            if let Some(p) = &prev {
                let old = p.rows();
                if m < old {
                    stats.failures.push(fail("row count decreased"));
                }
                let dh = state.head_dim();
                for h in 0..state.heads() {
                    let r_old = &p.radii().data()[h * old..(h + 1) * old];
                    let r_new = &state.radii().data()[h * m..h * m + old];
                    if r_old != r_new {
                        stats.failures.push(fail("radius of an existing row changed"));
                    }
                    let row0 = |rows: usize, t: &Tensor<f64>| t.data()[h * rows * dh..h * rows * dh + dh].to_vec();
                    if row0(old, p.keys()) != row0(m, state.keys()) || row0(old, p.values()) != row0(m, state.values()) {
                        stats.failures.push(fail("sink row 0 changed"));
                    }
                    for r in 1..old {
                        let at = (h * old + r) * dh;
                        let now = (h * m + r) * dh;
                        if p.values().data()[at..at + dh] != state.values().data()[now..now + dh] {
                            stats.merges_seen += 1;
                        }
                    }
                }
                let bound = (cfg.chunk_len as f64).max(cfg.schedule.budget(e));
                if m as f64 > bound {
                    stats.failures.push(fail(&format!("{m} rows exceed budget bound {bound}")));
                }
                if m > e - cfg.window() {
                    stats.failures.push(fail("more rows than evicted tokens"));
                }
            }
            let (_, views) = readout_views(state, &inp.params, &cfg)?;
            let dh = state.head_dim();
            for h in 0..state.heads() {
                for r in 0..m {
                    let row = &views.data()[(h * m + r) * dh..(h * m + r + 1) * dh];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let rho = state.radii().data()[h * m + r];
                    let err = (norm - rho).abs();
                    stats.worst_norm_error = stats.worst_norm_error.max(err);
                    if err > 1e-9 {
                        stats.failures.push(fail(&format!("value norm {norm} vs radius {rho}")));
                    }
                }
            }
            prev = Some(state.clone());
        }
    }
    let mut tally = Tally::new("state_invariants", 1e-9);
    tally.row.cases = stats.recurrence_steps;
    tally.row.max_abs = stats.worst_norm_error;
    tally.row.pass = stats.failures.is_empty() && stats.merges_seen > 0;
    tally.row.detail = match stats.failures.first() {
        Some(f) => format!("{} failures, first: {f}", stats.failures.len()),
        None if stats.merges_seen == 0 => "no merges exercised".into(),
        None => format!("merges={}", stats.merges_seen),
    };
    Ok((tally.done(), stats))
}

/// The two-layer `d = 16` model used for gradient checks.
pub fn gradient_check_model(modes: Vec<AttentionMode>, seed: u64) -> Result<GptAlpha<f64>> {
    let cfg = GptAlphaConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 17,
        modes,
        kvm: KvmConfig {
            chunk_len: 2,
            n_bswa_chunks: 2,
            rotary_width: 4,
            schedule: StateSchedule::PowerLaw {
                coefficient: 1.0,
                exponent: 0.5,
            },
            ..KvmConfig::default()
        },
        ..GptAlphaConfig::default()
    };
    let mut m = GptAlpha::new(cfg, seed)?;
    m.jitter(0.3, seed + 7);
    Ok(m)
}

pub fn check_gradients(level: CheckLevel) -> Result<CheckRow> {
    let m = gradient_check_model(vec![AttentionMode::Kvm], 1)?;
    let seq: Vec<usize> = (0..17).map(|i| (i * 5 + 2) % 17).collect();
    let samples = if level == CheckLevel::Full { 6 } else { 2 };
    let report = grad_check(&m, &seq, samples, 3)?;
    let worst = report.worst_tensor();
    Ok(CheckRow {
        check: "gradients".into(),
        cases: report.tensors.iter().map(|t| t.checked).sum(),
        max_abs: report.worst_rel(),
        tolerance: 1e-4,
        pass: report.worst_rel() < 1e-4,
        detail: worst.map_or(String::new(), |t| format!("worst relative error in {}", t.name)),
    })
}

/// Every check at `level`, in a fixed order.
pub fn run_checks(level: CheckLevel, targets: &CheckTargets) -> Result<Vec<CheckRow>> {
    let full = level == CheckLevel::Full;
    let mut rows = vec![check_mask(level, targets)];
    rows.extend(check_equivalences(level)?);
    rows.push(check_warm_up(level)?);
    rows.push(check_merge_targets(level)?);
    rows.push(check_merge_scale_invariance(if full { 10_000 } else { 1_000 }, 7)?);
    rows.push(check_state_invariants(if full { 1_000 } else { 200 }, 11)?.0);
    rows.push(check_gradients(level)?);
    Ok(rows)
}
