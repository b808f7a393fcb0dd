//! Adam with bias correction and global-norm gradient clipping.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment state, aligned with the parameter
/// order the optimizer is constructed with.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let moments = shapes
            .iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .collect();
        Adam { cfg, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over aligned (parameter, gradient) pairs. Gradients are
    /// first scaled so their global L2 norm does not exceed `clip_norm`
    /// (pass infinity to disable). Returns (pre-clip norm, post-clip norm).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        clip_norm: f64,
    ) -> (f64, f64) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        assert_eq!(params.len(), self.moments.len(), "optimizer slot mismatch");
        let raw_norm = global_norm(grads);
        let scale = if raw_norm > clip_norm { clip_norm / raw_norm } else { 1.0 };
        self.step += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.moments.iter_mut())
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            for i in 0..p.numel() {
                let gi = g.data()[i] * scale;
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * gi;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                p.data_mut()[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        (raw_norm, raw_norm.min(clip_norm))
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With zero-initialized moments, bias correction makes the first
        // update lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::new(vec![3], vec![0.3, -0.7, 0.001]);
        let mut adam = Adam::new(cfg, &[vec![3]]);
        adam.step(&mut [&mut p], &[g.clone()], f64::INFINITY);
        for i in 0..3 {
            let expect = [1.0, -2.0, 0.5][i] - 0.01 * g.data()[i].signum();
            assert!((p.data()[i] - expect).abs() < 1e-6, "coord {i}: {}", p.data()[i]);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let grads = vec![
            Tensor::new(vec![2], vec![30.0, 40.0]), // norm 50
        ];
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(AdamConfig::default(), &[vec![2]]);
        let (raw, clipped) = adam.step(&mut [&mut p], &grads, 10.0);
        assert!((raw - 50.0).abs() < 1e-12);
        assert!(clipped <= 10.0 + 1e-9);
    }

    #[test]
    fn norm_below_threshold_is_untouched() {
        let grads = vec![Tensor::new(vec![2], vec![0.3, 0.4])];
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(AdamConfig::default(), &[vec![2]]);
        let (raw, clipped) = adam.step(&mut [&mut p], &grads, 10.0);
        assert_eq!(raw, clipped);
    }
}
