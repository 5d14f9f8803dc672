use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State budget `B(e)`: the number of state rows wanted at sequence position `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSchedule {
    /// Constant budget.
    Fixed { size: usize },
    /// `coefficient * e^exponent`.
    PowerLaw { coefficient: f64, exponent: f64 },
    /// `min(cap, coefficient * e^exponent)`.
    Saturating {
        cap: usize,
        coefficient: f64,
        exponent: f64,
    },
    /// `B(e) = +inf`: every overflow token is appended (full-attention limit).
    Unbounded,
}

impl Default for StateSchedule {
    fn default() -> Self {
        StateSchedule::sqrt()
    }
}

impl StateSchedule {
    /// The `16 * sqrt(N)` growth schedule.
    pub fn sqrt() -> Self {
        StateSchedule::PowerLaw {
            coefficient: 16.0,
            exponent: 0.5,
        }
    }

    pub fn budget(&self, e: usize) -> f64 {
        let e = e as f64;
        match *self {
            StateSchedule::Fixed { size } => size as f64,
            StateSchedule::PowerLaw {
                coefficient,
                exponent,
            } => coefficient * e.powf(exponent),
            StateSchedule::Saturating {
                cap,
                coefficient,
                exponent,
            } => (cap as f64).min(coefficient * e.powf(exponent)),
            StateSchedule::Unbounded => f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StateSchedule::Fixed { .. } | StateSchedule::Unbounded => true,
            StateSchedule::PowerLaw {
                coefficient,
                exponent,
            }
            | StateSchedule::Saturating {
                coefficient,
                exponent,
                ..
            } => coefficient.is_finite() && coefficient >= 0.0 && exponent.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid state schedule {self:?}")))
        }
    }

    pub fn label(&self) -> String {
        match *self {
            StateSchedule::Fixed { size } => format!("fixed-{size}"),
            StateSchedule::PowerLaw {
                coefficient,
                exponent,
            } => format!("power-{coefficient}x^{exponent}"),
            StateSchedule::Saturating {
                cap,
                coefficient,
                exponent,
            } => format!("sat-{cap}-{coefficient}x^{exponent}"),
            StateSchedule::Unbounded => "unbounded".to_string(),
        }
    }
}

/// Rows to append for an overflow block of `chunk_len` tokens at chunk end
/// `e`, given the current row count `m`. Always in `0..=chunk_len`.
pub fn plan_budget(schedule: &StateSchedule, e: usize, m: usize, chunk_len: usize) -> usize {
    let available = m + chunk_len;
    let budget = schedule.budget(e);
    let capped = if budget >= available as f64 {
        available
    } else if budget <= 0.0 {
        0
    } else {
        budget.floor() as usize
    };
    let target = m.max(capped);
    (target - m).min(chunk_len)
}
