use crate::backbone::ParamStore;
use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::training::{lr_at, TrainConfig};

/// Adam first and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(params: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = (0..params.len()).map(|i| Tensor::zeros(params.value(i).shape().to_vec())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One Adam update at 1-based `step` with the learning rate taken from the
/// schedule at `step - 1`.
///
/// Decoupled decay shrinks each decayed parameter by `lr_t * wd`, further
/// multiplied by `lr_t / base_lr` when `adamc` is on. Returns the learning
/// rate used.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    step: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return dim_err("optimizer_step", format!("{} grads for {} parameters", grads.len(), params.len()));
    }
    if step == 0 {
        return Err(Error::Invalid("optimizer steps are 1-based".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.name(i).to_string()));
        }
        if g.shape() != params.value(i).shape() {
            return dim_err("optimizer_step", format!("gradient of `{}` has shape {:?}", params.name(i), g.shape()));
        }
    }
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = lr_at(step - 1, cfg);
    let mut decay = lr * cfg.weight_decay;
    if cfg.adamc {
        decay *= lr / cfg.base_lr;
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr_t, eps, clip) = (T::of(lr), T::of(cfg.adam_eps), T::of(clip));
    for (i, grad) in grads.iter().enumerate() {
        let shrink = if params.decays(i) || cfg.decay_scalars {
            T::one() - T::of(decay)
        } else {
            T::one()
        };
        let p = params.value_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j] * clip;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            p[j] = p[j] * shrink - lr_t * update;
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 0,
            total_steps: 100,
            base_lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    fn store(x: &[f64], decay: bool) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64([x.len()], x).unwrap(), decay);
        p
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = store(&[1.0, -2.0, 0.5], true);
        let mut st = AdamState::zeros(&p);
        let g = Tensor::from_f64([3], &[0.3, -4.0, 1e-3]).unwrap();
        let lr = optimizer_step(&mut p, &[g.clone()], &mut st, 1, &cfg()).unwrap();
        assert_eq!(lr, 0.1);
        for j in 0..3 {
            let gj = g.data()[j];
            let expect = [1.0, -2.0, 0.5][j] - lr * gj / (gj.abs() + 1e-8);
            assert!((p.value(0).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_only_decays_matrices() {
        let c = TrainConfig {
            weight_decay: 0.2,
            adamc: false,
            ..cfg()
        };
        for decay in [true, false] {
            let mut p = store(&[2.0, -1.0], decay);
            let mut st = AdamState::zeros(&p);
            optimizer_step(&mut p, &[Tensor::zeros([2])], &mut st, 1, &c).unwrap();
            let factor = if decay { 1.0 - 0.1 * 0.2 } else { 1.0 };
            assert_eq!(p.value(0).data(), &[2.0 * factor, -1.0 * factor]);
        }
    }

    #[test]
    fn adamc_at_peak_lr_equals_plain_decay() {
        let base = TrainConfig {
            weight_decay: 0.3,
            warmup_steps: 0,
            total_steps: usize::MAX,
            ..cfg()
        };
        let run = |adamc: bool| {
            let mut p = store(&[1.0, 3.0], true);
            let mut st = AdamState::zeros(&p);
            let c = TrainConfig { adamc, ..base.clone() };
            optimizer_step(&mut p, &[Tensor::from_f64([2], &[0.5, -0.5]).unwrap()], &mut st, 1, &c).unwrap();
            p
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[1.0], true);
        let mut st = AdamState::zeros(&p);
        let err = optimizer_step(&mut p, &[Tensor::from_f64([1], &[f64::NAN]).unwrap()], &mut st, 1, &cfg()).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "w"), "{err}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.5, -0.3, 0.2, 0.8];
        let mut p = store(&[0.0; 4], false);
        let mut st = AdamState::zeros(&p);
        let c = TrainConfig {
            base_lr: 0.08,
            total_steps: 50,
            ..cfg()
        };
        let loss = |p: &ParamStore<f64>| p.value(0).data().iter().zip(target).map(|(x, t)| 0.5 * (x - t) * (x - t)).sum::<f64>();
        for step in 1..=50 {
            let g: Vec<f64> = p.value(0).data().iter().zip(target).map(|(x, t)| x - t).collect();
            optimizer_step(&mut p, &[Tensor::from_f64([4], &g).unwrap()], &mut st, step, &c).unwrap();
        }
        assert!(loss(&p) < 1e-3, "{}", loss(&p));
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let c = TrainConfig {
            clip_norm: Some(1.0),
            adam_eps: 1.0,
            ..cfg()
        };
        let mut a = store(&[0.0], false);
        let mut b = store(&[0.0], false);
        let (mut sa, mut sb) = (AdamState::zeros(&a), AdamState::zeros(&b));
        optimizer_step(&mut a, &[Tensor::from_f64([1], &[100.0]).unwrap()], &mut sa, 1, &c).unwrap();
        optimizer_step(&mut b, &[Tensor::from_f64([1], &[1.0]).unwrap()], &mut sb, 1, &c).unwrap();
        assert_eq!(a, b);
    }
}
