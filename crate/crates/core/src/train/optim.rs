use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; `grads` is ordered like
    /// the store.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state for {} parameters, got {} gradients for {}",
                self.first.len(),
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - self.beta1), lit(1.0 - self.beta2));
        let lr_t: T = lit(lr);
        let decay: T = lit(1.0 - lr * self.weight_decay);
        let (bc1, bc2, eps): (T, T, T) = (lit(bc1), lit(bc2), lit(self.eps));

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.requires_grad {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", g.shape(), p.value.shape()));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    /// Warmup covers `ceil(warmup_fraction · total)` steps (at least one).
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total_steps as f64 * warmup_fraction).ceil() as usize)
            .max(1)
            .min(total_steps.saturating_sub(1).max(1));
        CosineSchedule {
            base_lr,
            total_steps,
            warmup_steps: warmup,
        }
    }

    /// Learning rate at (possibly fractional) step `t`.
    pub fn at(&self, t: f64) -> f64 {
        let w = self.warmup_steps as f64;
        if t < w {
            return self.base_lr * t / w;
        }
        let span = (self.total_steps as f64 - w).max(1.0);
        let progress = ((t - w) / span).clamp(0.0, 1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.at(step as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let v = p.by_name("p").unwrap().value.data()[0];
        assert!((v - 0.9).abs() < 1e-8, "{v}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_store(0.37);
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        }
        assert_eq!(p.by_name("p").unwrap().value.data()[0], 0.37);
    }

    #[test]
    fn decay_is_decoupled() {
        let (lr, wd) = (0.1, 0.01);
        let mut with = scalar_store(2.0);
        let mut without = scalar_store(2.0);
        let mut o1 = AdamW::new(&with, wd);
        let mut o2 = AdamW::new(&without, 0.0);
        o1.step(&mut with, &[Tensor::scalar(0.5)], lr).unwrap();
        o2.step(&mut without, &[Tensor::scalar(0.5)], lr).unwrap();
        let a = with.by_name("p").unwrap().value.data()[0];
        let b = without.by_name("p").unwrap().value.data()[0];
        assert!((b - a - lr * wd * 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(1e-4, 1000, 0.01);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(10), 1e-4);
        assert!(s.lr(999) < 1e-9);
        let mid = s.lr(10 + 495);
        assert!((mid - 0.5e-4).abs() < 0.01 * 0.5e-4);
        let (l, r) = (s.at(10.0 - 1e-9), s.at(10.0 + 1e-9));
        assert!((l - r).abs() < 1e-12);
        // monotone decay after warmup
        assert!((11..1000).all(|t| s.lr(t) <= s.lr(t - 1)));
    }
}
