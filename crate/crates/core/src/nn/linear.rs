use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{visit_arr, visit_arr_mut, Params};

/// Affine layer `y = x Wᵀ + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    /// Uniform init in ±1/√fan_in for weights and bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-k, k).unwrap();
        Self {
            w: Array2::from_shape_fn((output, input), |_| dist.sample(rng)),
            b: Array1::from_shape_fn(output, |_| dist.sample(rng)),
            gw: Array2::zeros((output, input)),
            gb: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
            gw: Array2::zeros((output, input)),
            gb: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        y.assign(&self.b);
        general_mat_mul(1.0, x, &self.w.t(), 1.0, &mut y);
        y
    }

    /// Returns the input gradient; accumulates parameter gradients when asked.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>, accumulate: bool) -> Array2<f64> {
        if accumulate {
            general_mat_mul(1.0, &gy.t(), x, 1.0, &mut self.gw);
            self.gb += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.w)
    }

    pub fn input_grad(&self, gy: &Array2<f64>) -> Array2<f64> {
        gy.dot(&self.w)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        visit_arr(f, &self.w, &self.gw);
        visit_arr(f, &self.b, &self.gb);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        visit_arr_mut(f, &mut self.w, &mut self.gw);
        visit_arr_mut(f, &mut self.b, &mut self.gb);
    }
}
