//! Linear recurrent unit layers and the history encoder built from them.
//!
//! Each layer runs the diagonal complex recurrence
//! `x_t = λ ⊙ x_{t−1} + γ ⊙ (B u_t)` with `λ = exp(−exp(ν) + iθ)`, so
//! `|λ| < 1` holds for every parameter value. A reset marker at `t` replaces
//! `λ` by zero, which isolates the sequence that starts there. The readout is
//! `y_t = Re(C x_t) + D ⊙ u_t` followed by a leaky-ReLU residual.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::{leaky, leaky_arr, leaky_backward, visit_arr, visit_arr_mut, Linear, Params};

#[derive(Debug, Clone)]
pub struct LruLayer {
    pub nu: Array1<f64>,
    pub theta: Array1<f64>,
    pub gamma_log: Array1<f64>,
    pub b_re: Array2<f64>,
    pub b_im: Array2<f64>,
    pub c_re: Array2<f64>,
    pub c_im: Array2<f64>,
    pub d: Array1<f64>,
    grads: LruGrads,
}

#[derive(Debug, Clone)]
struct LruGrads {
    nu: Array1<f64>,
    theta: Array1<f64>,
    gamma_log: Array1<f64>,
    b_re: Array2<f64>,
    b_im: Array2<f64>,
    c_re: Array2<f64>,
    c_im: Array2<f64>,
    d: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LruLayerCache {
    u: Array2<f64>,
    bu_re: Array2<f64>,
    bu_im: Array2<f64>,
    x_re: Array2<f64>,
    x_im: Array2<f64>,
    y: Array2<f64>,
}

/// Scan implementation used by the sequence forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scan {
    Sequential,
    Parallel,
}

impl LruLayer {
    /// Magnitudes uniform in [r_min, r_max], phases uniform in [0, max_phase].
    pub fn new(
        width: usize,
        hidden: usize,
        r_min: f64,
        r_max: f64,
        max_phase: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let ur = Uniform::new_inclusive(r_min * r_min, r_max * r_max).unwrap();
        let up = Uniform::new_inclusive(0.0, max_phase).unwrap();
        let mut nu = Array1::zeros(hidden);
        let mut theta = Array1::zeros(hidden);
        let mut gamma_log = Array1::zeros(hidden);
        for h in 0..hidden {
            // Sampling r² uniformly on the ring, as in the LRU reference init.
            let r: f64 = ur.sample(rng).sqrt();
            nu[h] = (-r.ln()).ln();
            theta[h] = up.sample(rng);
            gamma_log[h] = (1.0 - r * r).sqrt().ln();
        }
        let nb = Normal::new(0.0, (1.0 / (2.0 * width as f64)).sqrt()).unwrap();
        let nc = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        let nd = Normal::new(0.0, 1.0 / (width as f64).sqrt()).unwrap();
        let b_re = Array2::from_shape_fn((hidden, width), |_| nb.sample(rng));
        let b_im = Array2::from_shape_fn((hidden, width), |_| nb.sample(rng));
        let c_re = Array2::from_shape_fn((width, hidden), |_| nc.sample(rng));
        let c_im = Array2::from_shape_fn((width, hidden), |_| nc.sample(rng));
        let d = Array1::from_shape_fn(width, |_| nd.sample(rng));
        let grads = LruGrads {
            nu: Array1::zeros(hidden),
            theta: Array1::zeros(hidden),
            gamma_log: Array1::zeros(hidden),
            b_re: Array2::zeros((hidden, width)),
            b_im: Array2::zeros((hidden, width)),
            c_re: Array2::zeros((width, hidden)),
            c_im: Array2::zeros((width, hidden)),
            d: Array1::zeros(width),
        };
        Self {
            nu,
            theta,
            gamma_log,
            b_re,
            b_im,
            c_re,
            c_im,
            d,
            grads,
        }
    }

    pub fn width(&self) -> usize {
        self.d.len()
    }

    pub fn hidden(&self) -> usize {
        self.nu.len()
    }

    pub fn lambda(&self, h: usize) -> C64 {
        C64::new(-self.nu[h].exp(), self.theta[h]).exp()
    }

    pub fn lambdas(&self) -> Vec<C64> {
        (0..self.hidden()).map(|h| self.lambda(h)).collect()
    }

    pub fn forward_seq(&self, u: &Array2<f64>, resets: &[bool], scan: Scan) -> LruLayerCache {
        let len = u.nrows();
        let hidden = self.hidden();
        let bu_re = u.dot(&self.b_re.t());
        let bu_im = u.dot(&self.b_im.t());
        let lambdas = self.lambdas();
        let gammas: Vec<f64> = self.gamma_log.iter().map(|g| g.exp()).collect();
        // Channel-major buffers so each channel scans over a contiguous slice.
        let columns: Vec<Vec<C64>> = (0..hidden)
            .into_par_iter()
            .map(|h| {
                let lam = lambdas[h];
                let a: Vec<C64> = (0..len)
                    .map(|t| if t == 0 || resets[t] { C64::new(0.0, 0.0) } else { lam })
                    .collect();
                let b: Vec<C64> = (0..len)
                    .map(|t| C64::new(bu_re[[t, h]], bu_im[[t, h]]) * gammas[h])
                    .collect();
                match scan {
                    Scan::Sequential => scan_sequential(&a, &b),
                    Scan::Parallel => scan_blelloch(&a, &b),
                }
            })
            .collect();
        let mut x_re = Array2::zeros((len, hidden));
        let mut x_im = Array2::zeros((len, hidden));
        for (h, col) in columns.iter().enumerate() {
            for (t, x) in col.iter().enumerate() {
                x_re[[t, h]] = x.re;
                x_im[[t, h]] = x.im;
            }
        }
        let mut y = u * &self.d;
        general_mat_mul(1.0, &x_re, &self.c_re.t(), 1.0, &mut y);
        general_mat_mul(-1.0, &x_im, &self.c_im.t(), 1.0, &mut y);
        LruLayerCache {
            u: u.clone(),
            bu_re,
            bu_im,
            x_re,
            x_im,
            y,
        }
    }

    /// Layer output `u + leaky(y)`.
    pub fn output(cache: &LruLayerCache, slope: f64) -> Array2<f64> {
        &cache.u + &leaky_arr(&cache.y, slope)
    }

    /// Backward pass for one layer. Returns the gradient w.r.t. the layer input.
    pub fn backward(
        &mut self,
        cache: &LruLayerCache,
        resets: &[bool],
        g_out: &Array2<f64>,
        slope: f64,
    ) -> Array2<f64> {
        let len = g_out.nrows();
        let hidden = self.hidden();
        let g_y = leaky_backward(&cache.y, g_out, slope);
        let mut g_u = g_out + &(&g_y * &self.d);
        self.grads.d += &(&g_y * &cache.u).sum_axis(Axis(0));
        general_mat_mul(1.0, &g_y.t(), &cache.x_re, 1.0, &mut self.grads.c_re);
        general_mat_mul(-1.0, &g_y.t(), &cache.x_im, 1.0, &mut self.grads.c_im);
        let gx_re = g_y.dot(&self.c_re);
        let gx_im = g_y.dot(&self.c_im).mapv(|v| -v);

        let lambdas = self.lambdas();
        let mut g_bu_re = Array2::zeros((len, hidden));
        let mut g_bu_im = Array2::zeros((len, hidden));
        for h in 0..hidden {
            let lam = lambdas[h];
            let gamma = self.gamma_log[h].exp();
            let mut g_lam = C64::new(0.0, 0.0);
            let mut g_gamma = 0.0;
            let mut acc = C64::new(0.0, 0.0);
            for t in (0..len).rev() {
                let next_a = if t + 1 < len && !resets[t + 1] { lam } else { C64::new(0.0, 0.0) };
                acc = C64::new(gx_re[[t, h]], gx_im[[t, h]]) + next_a.conj() * acc;
                if t > 0 && !resets[t] {
                    let prev = C64::new(cache.x_re[[t - 1, h]], cache.x_im[[t - 1, h]]);
                    g_lam += prev.conj() * acc;
                }
                let bu = C64::new(cache.bu_re[[t, h]], cache.bu_im[[t, h]]);
                g_gamma += (bu.conj() * acc).re;
                g_bu_re[[t, h]] = gamma * acc.re;
                g_bu_im[[t, h]] = gamma * acc.im;
            }
            let g_c = lam.conj() * g_lam;
            self.grads.nu[h] += g_c.re * -self.nu[h].exp();
            self.grads.theta[h] += g_c.im;
            self.grads.gamma_log[h] += gamma * g_gamma;
        }
        general_mat_mul(1.0, &g_bu_re.t(), &cache.u, 1.0, &mut self.grads.b_re);
        general_mat_mul(1.0, &g_bu_im.t(), &cache.u, 1.0, &mut self.grads.b_im);
        general_mat_mul(1.0, &g_bu_re, &self.b_re, 1.0, &mut g_u);
        general_mat_mul(1.0, &g_bu_im, &self.b_im, 1.0, &mut g_u);
        g_u
    }

    /// One online step from hidden state `x`, which is updated in place.
    pub fn step(&self, x: &mut [C64], u: &[f64], slope: f64) -> Vec<f64> {
        let width = self.width();
        for (h, xh) in x.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..width {
                re += self.b_re[[h, j]] * u[j];
                im += self.b_im[[h, j]] * u[j];
            }
            *xh = self.lambda(h) * *xh + C64::new(re, im) * self.gamma_log[h].exp();
        }
        (0..width)
            .map(|i| {
                let mut y = self.d[i] * u[i];
                for (h, xh) in x.iter().enumerate() {
                    y += self.c_re[[i, h]] * xh.re - self.c_im[[i, h]] * xh.im;
                }
                u[i] + leaky(y, slope)
            })
            .collect()
    }
}

/// `x_t = a_t x_{t−1} + b_t` with `x_{−1} = 0`, evaluated left to right.
pub fn scan_sequential(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(b.len());
    let mut x = C64::new(0.0, 0.0);
    for (ai, bi) in a.iter().zip(b) {
        x = ai * x + bi;
        out.push(x);
    }
    out
}

#[inline]
fn compose(l: (C64, C64), r: (C64, C64)) -> (C64, C64) {
    (l.0 * r.0, r.0 * l.1 + r.1)
}

/// Same recurrence as [`scan_sequential`] via a work-efficient Blelloch scan
/// over the associative composition of affine maps `x ↦ a x + b`.
pub fn scan_blelloch(a: &[C64], b: &[C64]) -> Vec<C64> {
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    let mut tree: Vec<(C64, C64)> = (0..size)
        .map(|i| if i < n { (a[i], b[i]) } else { (one, zero) })
        .collect();
    let mut stride = 2;
    while stride <= size {
        let half = stride / 2;
        for i in (stride - 1..size).step_by(stride) {
            tree[i] = compose(tree[i - half], tree[i]);
        }
        stride *= 2;
    }
    tree[size - 1] = (one, zero);
    stride = size;
    while stride >= 2 {
        let half = stride / 2;
        for i in (stride - 1..size).step_by(stride) {
            let left = tree[i - half];
            tree[i - half] = tree[i];
            tree[i] = compose(tree[i], left);
        }
        stride /= 2;
    }
    (0..n).map(|i| compose(tree[i], (a[i], b[i])).1).collect()
}

impl Params for LruLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        let g = &self.grads;
        visit_arr(f, &self.nu, &g.nu);
        visit_arr(f, &self.theta, &g.theta);
        visit_arr(f, &self.gamma_log, &g.gamma_log);
        visit_arr(f, &self.b_re, &g.b_re);
        visit_arr(f, &self.b_im, &g.b_im);
        visit_arr(f, &self.c_re, &g.c_re);
        visit_arr(f, &self.c_im, &g.c_im);
        visit_arr(f, &self.d, &g.d);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        let g = &mut self.grads;
        visit_arr_mut(f, &mut self.nu, &mut g.nu);
        visit_arr_mut(f, &mut self.theta, &mut g.theta);
        visit_arr_mut(f, &mut self.gamma_log, &mut g.gamma_log);
        visit_arr_mut(f, &mut self.b_re, &mut g.b_re);
        visit_arr_mut(f, &mut self.b_im, &mut g.b_im);
        visit_arr_mut(f, &mut self.c_re, &mut g.c_re);
        visit_arr_mut(f, &mut self.c_im, &mut g.c_im);
        visit_arr_mut(f, &mut self.d, &mut g.d);
    }
}

/// History encoder: nonlinear input projection, stacked LRU layers, nonlinear
/// output projection.
#[derive(Debug, Clone)]
pub struct LruEncoder {
    pub input: Linear,
    pub layers: Vec<LruLayer>,
    pub output: Linear,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct LruEncoderCache {
    obs: Array2<f64>,
    pre_in: Array2<f64>,
    layers: Vec<LruLayerCache>,
    last: Array2<f64>,
    pre_out: Array2<f64>,
}

/// Online recurrent state, one complex vector per layer.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub layers: Vec<Vec<C64>>,
}

impl LruEncoder {
    pub fn new(
        obs_dim: usize,
        width: usize,
        hidden: usize,
        n_layers: usize,
        out_dim: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let input = Linear::new(obs_dim, width, rng);
        let layers = (0..n_layers)
            .map(|_| LruLayer::new(width, hidden, 0.9, 0.999, std::f64::consts::PI / 10.0, rng))
            .collect();
        let output = Linear::new(width, out_dim, rng);
        Self {
            input,
            layers,
            output,
            slope,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.input.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, obs: &Array2<f64>, resets: &[bool]) -> (Array2<f64>, LruEncoderCache) {
        self.forward_with(obs, resets, Scan::Parallel)
    }

    pub fn forward_with(
        &self,
        obs: &Array2<f64>,
        resets: &[bool],
        scan: Scan,
    ) -> (Array2<f64>, LruEncoderCache) {
        assert_eq!(obs.nrows(), resets.len());
        let pre_in = self.input.forward(obs);
        let mut h = leaky_arr(&pre_in, self.slope);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let c = layer.forward_seq(&h, resets, scan);
            h = LruLayer::output(&c, self.slope);
            caches.push(c);
        }
        let pre_out = self.output.forward(&h);
        let z = leaky_arr(&pre_out, self.slope);
        (
            z,
            LruEncoderCache {
                obs: obs.clone(),
                pre_in,
                layers: caches,
                last: h,
                pre_out,
            },
        )
    }

    pub fn backward(&mut self, cache: &LruEncoderCache, resets: &[bool], gz: &Array2<f64>) {
        let g = leaky_backward(&cache.pre_out, gz, self.slope);
        let mut g = self.output.backward(&cache.last, &g, true);
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = layer.backward(c, resets, &g, self.slope);
        }
        let g = leaky_backward(&cache.pre_in, &g, self.slope);
        self.input.backward(&cache.obs, &g, true);
    }

    pub fn initial_state(&self) -> EncoderState {
        EncoderState {
            layers: self
                .layers
                .iter()
                .map(|l| vec![C64::new(0.0, 0.0); l.hidden()])
                .collect(),
        }
    }

    /// Consumes one observation and returns its feature vector.
    pub fn step(&self, state: &mut EncoderState, obs: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = (0..self.input.output_dim())
            .map(|i| {
                let mut v = self.input.b[i];
                for (j, o) in obs.iter().enumerate() {
                    v += self.input.w[[i, j]] * o;
                }
                leaky(v, self.slope)
            })
            .collect();
        for (layer, x) in self.layers.iter().zip(state.layers.iter_mut()) {
            h = layer.step(x, &h, self.slope);
        }
        (0..self.output.output_dim())
            .map(|i| {
                let mut v = self.output.b[i];
                for (j, hv) in h.iter().enumerate() {
                    v += self.output.w[[i, j]] * hv;
                }
                leaky(v, self.slope)
            })
            .collect()
    }

    pub fn max_lambda_modulus(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.lambdas())
            .map(|l| l.norm())
            .fold(0.0, f64::max)
    }
}

impl Params for LruEncoder {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.input.visit(f);
        self.layers.iter().for_each(|l| l.visit(f));
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.input.visit_mut(f);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.output.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::rng::{stream, Stream};

    fn loss(enc: &LruEncoder, obs: &Array2<f64>, resets: &[bool], w: &Array2<f64>) -> f64 {
        let (z, _) = enc.forward_with(obs, resets, Scan::Sequential);
        (&z * w).sum()
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = stream(3, Stream::Init, &[]);
        let mut enc = LruEncoder::new(3, 6, 5, 2, 4, 0.01, &mut rng);
        let len = 9;
        let obs = Array2::from_shape_fn((len, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((len, 4), |_| rng.random_range(-1.0..1.0));
        let resets: Vec<bool> = (0..len).map(|t| t == 0 || t == 5).collect();
        let report = gradcheck(
            &mut enc,
            |e| loss(e, &obs, &resets, &w),
            |e| {
                let (_, cache) = e.forward(&obs, &resets);
                e.backward(&cache, &resets, &w);
            },
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn scans_agree() {
        let mut rng = stream(4, Stream::Init, &[]);
        let n = 300;
        let a: Vec<C64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.05) {
                    C64::new(0.0, 0.0)
                } else {
                    C64::from_polar(rng.random_range(0.9..0.999), rng.random_range(0.0..0.3))
                }
            })
            .collect();
        let b: Vec<C64> = (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let s = scan_sequential(&a, &b);
        let p = scan_blelloch(&a, &b);
        let diff = s.iter().zip(&p).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn online_steps_match_sequence_forward() {
        let mut rng = stream(5, Stream::Init, &[]);
        let enc = LruEncoder::new(2, 8, 6, 2, 5, 0.01, &mut rng);
        let obs = Array2::from_shape_fn((12, 2), |_| rng.random_range(-1.0..1.0));
        let resets: Vec<bool> = (0..12).map(|t| t == 0).collect();
        let (z, _) = enc.forward(&obs, &resets);
        let mut st = enc.initial_state();
        for t in 0..12 {
            let zt = enc.step(&mut st, obs.row(t).as_slice().unwrap());
            for (a, b) in zt.iter().zip(z.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
