use crate::tensor::{Gradients, ParamStore, Scalar, Tensor};

/// Linear warm-up to `base` over `warmup` steps, then `base · sqrt(warmup / step)`.
/// Steps count from 1. With no warm-up the rate stays at `base`.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    let step = step.max(1);
    if warmup == 0 {
        base
    } else if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        base * (warmup as f64 / step as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update at learning rate `lr`:
    /// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let (bc1, bc2) = (F::from_f64(bc1), F::from_f64(bc2));
        let (lr, eps, wd) = (F::from_f64(lr), F::from_f64(c.eps), F::from_f64(c.weight_decay));
        for (i, (id, g)) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(F::from_f64(max_norm / norm));
    }
    norm
}
