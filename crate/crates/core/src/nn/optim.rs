use serde::{Deserialize, Serialize};

use super::Params;

/// Adam with decoupled weight decay. Moment buffers follow the visit order of
/// the module passed to [`AdamW::step`], so one optimizer serves one module.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    /// Moment buffers travel as checkpoint arrays, not in the JSON header.
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, p: &mut dyn Params, lr: f64) {
        let n = p.num_params();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut at = 0;
        p.visit_mut(&mut |val, grad| {
            for i in 0..val.len() {
                let g = grad[i];
                let k = at + i;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                val[i] -= lr * (wd * val[i] + mh / (vh.sqrt() + eps));
            }
            at += val.len();
        });
    }
}

/// Rescales all gradients so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(modules: &mut [&mut dyn Params], max_norm: f64) -> f64 {
    let norm = modules.iter().map(|m| m.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        modules.iter_mut().for_each(|m| m.scale_grad(k));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut l = Linear::zeros(2, 1);
        l.w = array![[1.0, -1.0]];
        l.gw = array![[0.5, -2.0]];
        let mut opt = AdamW::new(0.0);
        opt.step(&mut l, 0.1);
        assert!((l.w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((l.w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut l = Linear::zeros(2, 1);
        l.gw = array![[3.0, 4.0]];
        let n = clip_grad_norm(&mut [&mut l], 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((l.grad_sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
