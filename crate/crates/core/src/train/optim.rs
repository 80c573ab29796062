use crate::model::AdamMoments;
use crate::numerics::{Scalar, Tensor};

/// Linear decay from `base` at step 0 to zero at `total`.
pub fn lr_at(step: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

pub fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Scale `grads` so their global norm is at most `max_norm`. Returns the
/// norm afterwards.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return norm;
    }
    let scale = F::of(max_norm / norm);
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x = *x * scale;
        }
    }
    global_norm(grads)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = F::of(mi);
                v[i] = F::of(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = F::of(p[i].as_f64() - upd);
            }
        }
    }

    pub fn to_moments(&self) -> AdamMoments {
        AdamMoments {
            step: self.step,
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn from_moments(mo: &AdamMoments) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: mo.step,
            m: mo.m.iter().map(|t| t.cast()).collect(),
            v: mo.v.iter().map(|t| t.cast()).collect(),
        }
    }
}
