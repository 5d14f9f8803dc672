//! Slow reference implementations for tests.
//!
//! Everything here works per head and per position on plain `f64` vectors
//! and recomputes every derived quantity from scratch. Only the tensor type
//! and the config structs are shared with the production path.

use std::fmt;

use crate::error::{dim_err, Result};
use crate::kvm::{KvmConfig, KvmLayerParams, KvmState, StateSchedule};
use crate::numerics::Tensor;

/// Agreement between a reference and a candidate tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub max_abs: f64,
    pub max_rel: f64,
    /// Flat index of the first element whose difference exceeds the tolerance.
    pub first_mismatch: Option<usize>,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare(reference: &Tensor<f64>, candidate: &Tensor<f64>, tolerance: f64) -> Self {
        if reference.shape() != candidate.shape() {
            return Self {
                max_abs: f64::INFINITY,
                max_rel: f64::INFINITY,
                first_mismatch: Some(0),
                tolerance,
                pass: false,
            };
        }
        let mut report = Self {
            max_abs: 0.0,
            max_rel: 0.0,
            first_mismatch: None,
            tolerance,
            pass: true,
        };
        for (i, (&a, &b)) in reference.data().iter().zip(candidate.data()).enumerate() {
            let diff = (a - b).abs();
            let diff = if diff.is_nan() { f64::INFINITY } else { diff };
            report.max_abs = report.max_abs.max(diff);
            if diff > 0.0 {
                report.max_rel = report.max_rel.max(diff / a.abs().max(b.abs()));
            }
            if diff > tolerance && report.first_mismatch.is_none() {
                report.first_mismatch = Some(i);
            }
        }
        report.pass = report.max_abs <= tolerance;
        report
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_abs={:.3e} max_rel={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_abs,
            self.max_rel,
            self.tolerance
        )?;
        if let Some(i) = self.first_mismatch {
            write!(f, " first_mismatch={i}")?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn ln(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / sd * gain[i] + bias[i]).collect()
}

fn softmax_mix(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (wi, v) in w.iter().zip(values) {
        for c in 0..out.len() {
            out[c] += wi / total * v[c];
        }
    }
    out
}

fn budget(schedule: &StateSchedule, e: usize) -> f64 {
    let e = e as f64;
    match *schedule {
        StateSchedule::Fixed { size } => size as f64,
        StateSchedule::PowerLaw { coefficient, exponent } => coefficient * e.powf(exponent),
        StateSchedule::Saturating { cap, coefficient, exponent } => (coefficient * e.powf(exponent)).min(cap as f64),
        StateSchedule::Unbounded => f64::INFINITY,
    }
}

/// Row `t` of head `h` of a `[H, T, d_h]` tensor.
fn at(t: &Tensor<f64>, h: usize, u: usize) -> Vec<f64> {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    t.data()[(h * n + u) * d..(h * n + u + 1) * d].to_vec()
}

fn check_streams(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s {
        return dim_err("oracle", format!("stream shapes {:?} {:?} {:?}", s, k.shape(), v.shape()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Textbook causal softmax attention; keys of head `h` are scaled by
/// `temperature[h]`.
pub fn exact_causal_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, temperature: &[f64]) -> Result<Tensor<f64>> {
    let (heads, t, dh) = check_streams(q, k, v)?;
    let mut out = Vec::with_capacity(heads * t * dh);
    for h in 0..heads {
        for u in 0..t {
            let keys: Vec<Vec<f64>> = (0..=u).map(|j| at(k, h, j).iter().map(|x| x * temperature[h]).collect()).collect();
            let values: Vec<Vec<f64>> = (0..=u).map(|j| at(v, h, j)).collect();
            out.extend(softmax_mix(&at(q, h, u), &keys, &values));
        }
    }
    Tensor::new([heads, t, dh], out)
}

/// Exhaustive winner-take-all search. `keys` is `[H, k, d_h]`, `view` the
/// normalized state `[H, m, d_h]`; rows below `sinks` are skipped and ties go
/// to the lowest row.
pub fn brute_force_merge_assign(keys: &Tensor<f64>, view: &Tensor<f64>, sinks: usize) -> Vec<Vec<usize>> {
    let (heads, k, m) = (keys.shape()[0], keys.shape()[1], view.shape()[1]);
    (0..heads)
        .map(|h| {
            (0..k)
                .map(|j| {
                    let kj = at(keys, h, j);
                    let scores: Vec<f64> = (0..m).map(|i| dot(&kj, &at(view, h, i))).collect();
                    let top = scores[sinks..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (sinks..m).find(|&i| scores[i] == top).expect("at least one legal row")
                })
                .collect()
        })
        .collect()
}

struct HeadState {
    sk: Vec<Vec<f64>>,
    sv: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

/// Output and final state of [`naive_kvm_forward`].
#[derive(Clone, Debug)]
pub struct NaiveOutput {
    pub output: Tensor<f64>,
    pub state: Option<KvmState<f64>>,
}

/// Per-position KVM attention. Each head runs its own recurrence; state
/// views are rebuilt for every query.
pub fn naive_kvm_forward(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    x: &Tensor<f64>,
    params: &KvmLayerParams<f64>,
    cfg: &KvmConfig,
) -> Result<NaiveOutput> {
    let (heads, t, dh) = check_streams(q, k, v)?;
    let d = x.shape()[1];
    let (c, l) = (cfg.chunk_len, cfg.chunk_len * cfg.n_bswa_chunks);
    let ab = cfg.ablations;
    let sinks = if ab.sink_protection { cfg.sink_count } else { 0 };
    let mut out = vec![0.0; heads * t * dh];
    let mut finals = Vec::with_capacity(heads);

    for h in 0..heads {
        let gain = params.ln_gain.data()[h * dh..(h + 1) * dh].to_vec();
        let bias = params.ln_bias.data()[h * dh..(h + 1) * dh].to_vec();
        let tau_s = if ab.head_temperatures { params.tau_state.data()[h] } else { 1.0 };
        let tau_w = if ab.head_temperatures { params.tau_bswa.data()[h] } else { 1.0 };
        let kbar = |j: usize| {
            let mut key = at(k, h, j);
            for ch in key.iter_mut().take(cfg.rotary_width) {
                *ch = 0.0;
            }
            ln(&key, &gain, &bias)
        };
        let gate = |j: usize| {
            if !ab.merge_gate {
                return 1.0;
            }
            let z: f64 = (0..d).map(|i| x.data()[j * d + i] * params.w_gate.data()[i * heads + h]).sum();
            1.0 + if z >= 0.0 { z } else { z.exp() - 1.0 }
        };
        let mut st: Option<HeadState> = None;

        for u in 0..t {
            let mut window_start = 0;
            if u >= l {
                let s = l + (u - l) / c * c;
                window_start = s + c - l;
                if u == s {
                    st = Some(match st.take() {
                        None => HeadState {
                            sk: (0..c).map(kbar).collect(),
                            sv: (0..c).map(|j| at(v, h, j)).collect(),
                            rho: (0..c).map(|j| norm(&at(v, h, j))).collect(),
                        },
                        Some(mut state) => {
                            let block: Vec<usize> = (window_start - c..window_start).collect();
                            let m = state.sk.len();
                            let b = budget(&cfg.schedule, s + c);
                            let target = if b >= (m + c) as f64 { m + c } else { (b.max(0.0).floor() as usize).max(m) };
                            let n_append = (target.max(m) - m).min(c);

                            let pre: Vec<Vec<f64>> = state.sk.iter().map(|r| ln(r, &gain, &bias)).collect();
                            let mut scored: Vec<(f64, usize)> = block
                                .iter()
                                .map(|&j| {
                                    let kj = kbar(j);
                                    (pre.iter().map(|r| dot(&kj, r)).fold(f64::NEG_INFINITY, f64::max), j)
                                })
                                .collect();
                            if n_append > 0 && n_append < c {
                                scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                            }
                            let mut append: Vec<usize> = scored[..n_append].iter().map(|p| p.1).collect();
                            let mut merge: Vec<usize> = scored[n_append..].iter().map(|p| p.1).collect();
                            append.sort();
                            merge.sort();
                            for &j in &append {
                                state.sk.push(kbar(j));
                                state.sv.push(at(v, h, j));
                                state.rho.push(norm(&at(v, h, j)));
                            }
                            let post: Vec<Vec<f64>> = state.sk.iter().map(|r| ln(r, &gain, &bias)).collect();
                            let targets: Vec<usize> = merge
                                .iter()
                                .map(|&j| {
                                    let kj = kbar(j);
                                    let mut best = sinks;
                                    for i in sinks..post.len() {
                                        if dot(&kj, &post[i]) > dot(&kj, &post[best]) {
                                            best = i;
                                        }
                                    }
                                    best
                                })
                                .collect();
                            for (&j, &target) in merge.iter().zip(&targets) {
                                let (g, kj, vj) = (gate(j), kbar(j), at(v, h, j));
                                for ch in 0..dh {
                                    state.sk[target][ch] += g * kj[ch];
                                    state.sv[target][ch] += g * vj[ch];
                                }
                            }
                            state
                        }
                    });
                }
            }

            let mut keys = Vec::new();
            let mut values = Vec::new();
            if let Some(state) = &st {
                for i in 0..state.sk.len() {
                    keys.push(ln(&state.sk[i], &gain, &bias).iter().map(|x| x * tau_s).collect());
                    let sv = &state.sv[i];
                    values.push(if ab.value_length_norm {
                        let scale = state.rho[i] / norm(sv).max(cfg.eps_norm);
                        sv.iter().map(|x| x * scale).collect()
                    } else {
                        sv.clone()
                    });
                }
            }
            for j in window_start..=u {
                keys.push(at(k, h, j).iter().map(|x| x * tau_w).collect());
                values.push(at(v, h, j));
            }
            let y = softmax_mix(&at(q, h, u), &keys, &values);
            out[(h * t + u) * dh..(h * t + u + 1) * dh].copy_from_slice(&y);
        }
        finals.push(st);
    }

    let state = if finals.iter().all(Option::is_some) && !finals.is_empty() {
        let states: Vec<HeadState> = finals.into_iter().map(Option::unwrap).collect();
        let m = states[0].sk.len();
        let flat = |f: &dyn Fn(&HeadState) -> Vec<f64>| states.iter().flat_map(f).collect::<Vec<f64>>();
        Some(KvmState::new(
            Tensor::new([heads, m, dh], flat(&|s| s.sk.concat()))?,
            Tensor::new([heads, m, dh], flat(&|s| s.sv.concat()))?,
            Tensor::new([heads, m], flat(&|s| s.rho.clone()))?,
            sinks,
        )?)
    } else {
        None
    };
    Ok(NaiveOutput {
        output: Tensor::new([heads, t, dh], out)?,
        state,
    })
}
