//! AdamW with decoupled weight decay.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: 0.0 }
    }
}

/// What happened during one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A non-finite gradient was seen; parameters were left untouched.
    SkippedNonFinite,
}

pub struct AdamW<F> {
    cfg: AdamWConfig,
    step: u64,
    first_moment: Vec<Tensor<F>>,
    second_moment: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    /// Moment buffers are shaped after `params` in the given order; every
    /// subsequent `step` call must pass the same parameters in the same order.
    pub fn new(cfg: AdamWConfig, params: &[&Tensor<F>]) -> Self {
        let first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let second = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamW { cfg, step: 0, first_moment: first, second_moment: second }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> StepOutcome {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "grads/params length mismatch");
        for (p, g) in params.iter().zip(grads.iter()) {
            assert_eq!(p.shape(), g.shape(), "grad shape {:?} vs param {:?}", g.shape(), p.shape());
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return StepOutcome::SkippedNonFinite;
        }

        let clip_scale = if self.cfg.grad_clip > 0.0 {
            let total: f64 = grads
                .iter()
                .map(|g| g.iter().map(|&v| v.to_f64_lossy().powi(2)).sum::<f64>())
                .sum();
            let norm = total.sqrt();
            if norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let beta1 = F::from_f64(self.cfg.beta1);
        let beta2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bias2 = F::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);
        let decay = F::from_f64(self.cfg.lr * self.cfg.weight_decay);
        let clip = F::from_f64(clip_scale);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let p_data = param.data_mut();
            for (((p, &g0), m_i), v_i) in p_data
                .iter_mut()
                .zip(grad.data().iter())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = g0 * clip;
                *m_i = beta1 * *m_i + (one - beta1) * g;
                *v_i = beta2 * *v_i + (one - beta2) * g * g;
                let m_hat = *m_i / bias1;
                let v_hat = *v_i / bias2;
                // decoupled decay: applied to the weight, not the moments
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let p0 = Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]);
        let mut p = p0.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]);
        let g = Tensor::<f64>::zeros(vec![3]);
        assert_eq!(opt.step(&mut [&mut p], &[g]), StepOutcome::Applied);
        assert_eq!(p, p0);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // g = 1 constant: bias corrections cancel, update = lr / (1 + eps)
        let mut p = Tensor::<f64>::scalar(0.25);
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]);
        let delta = 0.25 - p.item();
        assert!((delta - 1e-3).abs() < 1e-3 * 1e-6, "delta {}", delta);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        let out = opt.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn quadratic_descends_monotonically_after_warmup() {
        // loss = 0.5 * sum((x - target)^2)
        let target = [3.0, -1.0, 0.5, 2.0];
        let mut x = Tensor::<f64>::from_f64(vec![4], &[0.0; 4]);
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&x]);
        let loss_of = |x: &Tensor<f64>| -> f64 {
            x.data().iter().zip(target.iter()).map(|(&v, &t)| 0.5 * (v - t) * (v - t)).sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let grad_data: Vec<f64> =
                x.data().iter().zip(target.iter()).map(|(&v, &t)| v - t).collect();
            let g = Tensor::from_f64(vec![4], &grad_data);
            opt.step(&mut [&mut x], &[g]);
            losses.push(loss_of(&x));
        }
        for w in losses[10..].windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss increased after warm-up: {} -> {}", w[0], w[1]);
        }
    }
}
