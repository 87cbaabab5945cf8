use ndarray::{Array1, Array2};
use rand::Rng;

use super::{layer_norm, layer_norm_backward, leaky_arr, leaky_backward, Linear, Params};

/// Stack of `Linear → LayerNorm (optional, affine-free) → leaky ReLU` blocks
/// followed by a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub layer_norm: bool,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    /// Input of the output layer (the last hidden feature).
    pub features: Array2<f64>,
}

impl Mlp {
    pub fn new(
        input: usize,
        widths: &[usize],
        output: usize,
        layer_norm: bool,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut d = input;
        for &w in widths {
            hidden.push(Linear::new(d, w, rng));
            d = w;
        }
        Self {
            hidden,
            out: Linear::new(d, output, rng),
            layer_norm,
            slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    /// Width `k` of the feature vector feeding the output layer.
    pub fn feature_dim(&self) -> usize {
        self.out.input_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.hidden.len());
        let mut normed = Vec::with_capacity(self.hidden.len());
        let mut inv_std = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for lin in &self.hidden {
            let z = lin.forward(&h);
            inputs.push(h);
            let (n, inv) = if self.layer_norm {
                layer_norm(&z)
            } else {
                (z, Array1::zeros(0))
            };
            h = leaky_arr(&n, self.slope);
            normed.push(n);
            inv_std.push(inv);
        }
        let y = self.out.forward(&h);
        (
            y,
            MlpCache {
                inputs,
                normed,
                inv_std,
                features: h,
            },
        )
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Backpropagates `gy`; returns the input gradient. Parameter gradients
    /// are accumulated only when `accumulate` is set.
    pub fn backward(&mut self, cache: &MlpCache, gy: &Array2<f64>, accumulate: bool) -> Array2<f64> {
        let mut g = self.out.backward(&cache.features, gy, accumulate);
        for i in (0..self.hidden.len()).rev() {
            g = leaky_backward(&cache.normed[i], &g, self.slope);
            if self.layer_norm {
                g = layer_norm_backward(&cache.normed[i], &cache.inv_std[i], &g);
            }
            g = self.hidden[i].backward(&cache.inputs[i], &g, accumulate);
        }
        g
    }
}

impl Mlp {
    /// Input gradient only; parameter gradients are left untouched.
    pub fn input_grad(&self, cache: &MlpCache, gy: &Array2<f64>) -> Array2<f64> {
        let mut g = self.out.input_grad(gy);
        for i in (0..self.hidden.len()).rev() {
            g = leaky_backward(&cache.normed[i], &g, self.slope);
            if self.layer_norm {
                g = layer_norm_backward(&cache.normed[i], &cache.inv_std[i], &g);
            }
            g = self.hidden[i].input_grad(&g);
        }
        g
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.hidden.iter().for_each(|l| l.visit(f));
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.hidden.iter_mut().for_each(|l| l.visit_mut(f));
        self.out.visit_mut(f);
    }
}
