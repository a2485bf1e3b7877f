use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::ParamStore;
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept per parameter in
/// registration order; frozen parameters and parameters without a gradient
/// are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::model::Param<T>| vec![T::zero(); p.tensor.numel()];
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err(
                "optimizer_step",
                format!(
                    "{} gradients, {} moments for {} parameters",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if p.frozen {
                continue;
            }
            if g.len() != p.tensor.numel() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("{}: gradient length {}", p.name, g.len()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    CosineDecay,
}

/// Learning rate at optimizer step `step` (0-based) of `total`: linear
/// warmup, then cosine decay from `base` to `min_lr`.
pub fn learning_rate(base: f64, min_lr: f64, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::scalar(v));
        }
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut s = store(&[1.5, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[Some(vec![0.0]), Some(vec![0.0])], 0.1).unwrap();
        assert_eq!(s.tensors(), store(&[1.5, -2.0]).tensors());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // m = 0.1 g, v = 0.01 g^2; bias corrections give mhat = g, vhat = g^2,
        // so the step is lr * g / (|g| + eps).
        for g in [3.0, -0.25] {
            let mut s = store(&[0.0]);
            let mut opt = AdamW::new(AdamWConfig::default(), &s);
            opt.step(&mut s, &[Some(vec![g])], 1e-3).unwrap();
            let want = -1e-3 * g / (g.abs() + 1e-8);
            let got = s.get(crate::model::ParamId(0)).item().unwrap();
            assert!((got - want).abs() < 1e-15);
            assert!((got.abs() - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = store(&[2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Some(vec![0.0])], 0.5).unwrap();
        assert_eq!(s.get(crate::model::ParamId(0)).item().unwrap(), 2.0 * (1.0 - 0.5 * 0.1));
    }

    #[test]
    fn frozen_and_missing_gradients_are_skipped() {
        let mut s = store(&[1.0, 1.0, 1.0]);
        s.set_frozen_where(|n| n == "p0");
        let cfg = AdamWConfig {
            weight_decay: 0.3,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Some(vec![1.0]), None, Some(vec![1.0])], 0.1)
            .unwrap();
        let v: Vec<f64> = s.tensors().iter().map(|t| t.item().unwrap()).collect();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert!(v[2] < 1.0);
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(learning_rate(1.0, 0.0, 0, 0, 10), 1.0);
        assert!((learning_rate(1.0, 0.0, 0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(learning_rate(1.0, 0.1, 0, 10, 10) - 0.1 < 1e-12);
        assert_eq!(learning_rate(1.0, 0.0, 4, 1, 10), 0.5);
        let lrs: Vec<f64> = (0..20).map(|s| learning_rate(1e-3, 1e-5, 2, s, 20)).collect();
        assert!(lrs[2..].windows(2).all(|w| w[1] <= w[0]));
    }
}
