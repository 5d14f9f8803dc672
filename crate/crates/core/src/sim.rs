//! Cost accounting for the chunk recurrence, without running a model.
//!
//! Costs count score entries: one per (query, key) pair for attention and
//! one per (overflow token, state row) pair for selection and merging.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kvm::{chunk_plans, plan_budget, KvmConfig, StateStep};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimPoint {
    pub n: usize,
    /// State rows after `n` tokens.
    pub state_rows: usize,
    /// Score entries for a full prefill of `n` tokens.
    pub prefill_cost: f64,
    /// Keys the next token attends to.
    pub decode_cost: f64,
}

/// Walks the chunk plans of an `n`-token sequence.
pub fn simulate(cfg: &KvmConfig, n: usize) -> SimPoint {
    let warm = n.min(cfg.window()) as f64;
    let mut prefill = warm * (warm + 1.0) / 2.0;
    let mut m = 0usize;
    let mut window_start = 0;
    for plan in chunk_plans(n, cfg) {
        match &plan.step {
            StateStep::Init(r) => {
                m = r.len();
                prefill += r.len() as f64;
            }
            StateStep::Evict(r) => {
                prefill += (r.len() * m) as f64;
                m += plan_budget(&cfg.schedule, plan.nominal_end, m, r.len());
            }
        }
        let queries = plan.end - plan.start;
        prefill += (queries * (m + plan.end - plan.window_start)) as f64;
        window_start = plan.window_start;
    }
    SimPoint {
        n,
        state_rows: m,
        prefill_cost: prefill,
        decode_cost: (m + n - window_start + 1) as f64,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    if pts.len() < 2 {
        return Err(Error::Invalid("slope fit needs two positive points".into()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimFit {
    pub state_slope: f64,
    pub prefill_slope: f64,
    pub decode_slope: f64,
}

/// Slopes over the top decade of `points`, i.e. `n >= max_n / 10`.
pub fn fit_top_decade(points: &[SimPoint]) -> Result<SimFit> {
    let top = points.iter().map(|p| p.n).max().unwrap_or(0) as f64;
    let sel: Vec<&SimPoint> = points.iter().filter(|p| p.n as f64 >= top / 10.0).collect();
    let fit = |f: &dyn Fn(&SimPoint) -> f64| loglog_slope(&sel.iter().map(|p| (p.n as f64, f(p))).collect::<Vec<_>>());
    Ok(SimFit {
        // A constant state has zero slope even though ln is flat at ln m.
        state_slope: fit(&|p| p.state_rows.max(1) as f64)?,
        prefill_slope: fit(&|p| p.prefill_cost)?,
        decode_slope: fit(&|p| p.decode_cost)?,
    })
}

/// Powers of two from `2^lo` to `2^hi` inclusive.
pub fn pow2_range(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|p| 1usize << p).collect()
}
