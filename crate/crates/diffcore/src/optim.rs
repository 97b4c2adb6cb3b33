use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Decay applies to matrices and
/// convolution kernels (rank ≥ 2) only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &Params<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid("adamw", format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                let name = params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);

        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let decay = if p.rank() >= 2 { T::of(1.0 - c.lr * c.weight_decay) } else { T::one() };
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *pj *= decay;
                *pj -= step_size * m[j] / (v[j].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.add("p", Tensor::from_f64([1], &[v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = Params::<f32>::new();
        params.add("w", Tensor::from_f64([2, 2], &[0.5, -1.0, 2.0, 3.0]).unwrap());
        let before = params.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params).unwrap();
        opt.step(&mut params, &[Tensor::zeros([2, 2])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias corrected both are 1, so the step is lr·g/|g|.
        let mut params = scalar_params(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &params).unwrap();
        opt.step(&mut params, &[Tensor::from_f64([1], &[1.0]).unwrap()]).unwrap();
        let p = params.tensors()[0].item();
        assert!((p - 0.9).abs() < 1e-7, "{p}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = scalar_params(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        let err = opt
            .step(&mut params, &[Tensor::from_f64([1], &[f64::NAN]).unwrap()])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"), "{err}");
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut params = scalar_params(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        assert!(opt.step(&mut params, &[Tensor::zeros([2])]).is_err());
        let bad = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(AdamW::new(bad, &params).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let mut params = scalar_params(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        for i in 1..=3 {
            opt.step(&mut params, &[Tensor::from_f64([1], &[0.5]).unwrap()]).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-12);
    }
}
