use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{GptAlpha, ParamStore};
use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Central-difference step.
const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero compare on absolute error.
const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_rel).fold(0.0, f64::max)
    }

    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.worst_rel.total_cmp(&b.worst_rel))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "{:<32} n={:<3} abs={:.3e} rel={:.3e}", t.name, t.checked, t.worst_abs, t.worst_rel)?;
        }
        write!(f, "worst rel={:.3e}", self.worst_rel())
    }
}

/// Compares analytic gradients with central differences on up to `samples`
/// random entries of every tensor. `build` places the parameters on a graph
/// (as trainable leaves when its flag is set) and returns the scalar loss and
/// the leaves in store order.
pub fn grad_check_fn<F>(params: &ParamStore<f64>, build: F, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, bool) -> Result<(Var, Vec<Var>)>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, p, false)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let (loss, leaves) = build(&mut g, params, true)?;
    g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (i, &leaf) in leaves.iter().enumerate() {
        let numel = params.value(i).numel();
        let picks = rand::seq::index::sample(&mut rng, numel, samples.min(numel));
        let mut check = TensorCheck {
            name: params.name(i).to_string(),
            checked: 0,
            worst_abs: 0.0,
            worst_rel: 0.0,
        };
        for j in picks.iter() {
            let analytic = g.grad(leaf).map_or(0.0, |t| t.data()[j]);
            let x = params.value(i).data()[j];
            probe.value_mut(i).data_mut()[j] = x + STEP;
            let up = eval(&probe)?;
            probe.value_mut(i).data_mut()[j] = x - STEP;
            let down = eval(&probe)?;
            probe.value_mut(i).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(FLOOR);
            check.checked += 1;
            check.worst_abs = check.worst_abs.max(abs);
            check.worst_rel = check.worst_rel.max(rel);
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}

/// [`grad_check_fn`] on the next-token loss of `seq`.
pub fn grad_check(model: &GptAlpha<f64>, seq: &[usize], samples: usize, seed: u64) -> Result<GradCheckReport> {
    grad_check_fn(
        &model.params,
        |g, p, trainable| {
            let m = GptAlpha {
                config: model.config.clone(),
                params: p.clone(),
            };
            let vars = m.place(g, trainable)?;
            let loss = m.loss(g, &vars, seq)?;
            Ok((loss, vars.all))
        },
        samples,
        seed,
    )
}
