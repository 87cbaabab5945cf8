//! Minimal neural network toolkit with hand-written backward passes.
//!
//! Everything runs in `f64` on row-major batches (`rows = samples`). Modules
//! expose their parameters through [`Params`], which visits `(value, grad)`
//! slice pairs in a fixed order; optimizers, clipping, checkpoints and target
//! network averaging are all written against that visitor.

mod gradcheck;
mod layer_norm;
mod linear;
mod lru;
mod mlp;
mod optim;

pub use gradcheck::{gradcheck, GradCheck};
pub use layer_norm::{layer_norm, layer_norm_backward, LN_EPS};
pub use linear::Linear;
pub use lru::{scan_blelloch, scan_sequential, EncoderState, Scan, LruEncoder, LruEncoderCache, LruLayer, LruLayerCache};
pub use mlp::{Mlp, MlpCache};
pub use optim::{clip_grad_norm, AdamW};

use ndarray::Array2;

pub const DEFAULT_SLOPE: f64 = 0.01;

pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, g| g.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |v, _| n += v.len());
        n
    }

    fn grad_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, g| s += g.iter().map(|x| x * x).sum::<f64>());
        s
    }

    fn scale_grad(&mut self, k: f64) {
        self.visit_mut(&mut |_, g| g.iter_mut().for_each(|x| *x *= k));
    }

    fn grads_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, g| ok &= g.iter().all(|x| x.is_finite()));
        ok
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |v, _| out.extend_from_slice(v));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, g| out.extend_from_slice(g));
        out
    }

    fn set_flat_values(&mut self, src: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |v, _| {
            v.copy_from_slice(&src[at..at + v.len()]);
            at += v.len();
        });
        assert_eq!(at, src.len(), "parameter count mismatch");
    }

    /// `self ← (1 − ρ)·self + ρ·src`, used for target networks.
    fn ema_towards(&mut self, src: &[f64], rho: f64) {
        let mut at = 0;
        self.visit_mut(&mut |v, _| {
            let n = v.len();
            for (t, s) in v.iter_mut().zip(&src[at..at + n]) {
                *t = (1.0 - rho) * *t + rho * s;
            }
            at += n;
        });
    }
}

/// Visits one array parameter and its gradient.
pub(crate) fn visit_arr<D: ndarray::Dimension>(
    f: &mut dyn FnMut(&[f64], &[f64]),
    v: &ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
) {
    f(v.as_slice().expect("standard layout"), g.as_slice().expect("standard layout"));
}

pub(crate) fn visit_arr_mut<D: ndarray::Dimension>(
    f: &mut dyn FnMut(&mut [f64], &mut [f64]),
    v: &mut ndarray::Array<f64, D>,
    g: &mut ndarray::Array<f64, D>,
) {
    f(
        v.as_slice_mut().expect("standard layout"),
        g.as_slice_mut().expect("standard layout"),
    );
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.iter().for_each(|p| p.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

#[inline]
pub fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn leaky_arr(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| leaky(v, slope))
}

/// `g ⊙ leaky'(pre)`.
pub fn leaky_backward(pre: &Array2<f64>, g: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out)
        .and(pre)
        .for_each(|o, &p| *o *= leaky_grad(p, slope));
    out
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
