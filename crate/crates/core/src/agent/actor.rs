use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};

use super::AgentConfig;
use crate::nn::{softplus, LruEncoder, Mlp, Params};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Recurrent squashed-Gaussian policy.
#[derive(Debug, Clone)]
pub struct Actor {
    pub encoder: LruEncoder,
    pub head: Mlp,
    pub action_dim: usize,
}

/// One reparameterized draw per row, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Squashed {
    pub action: Array2<f64>,
    pub log_prob: Vec<f64>,
    raw: Array2<f64>,
    noise: Array2<f64>,
}

fn log_std(rho: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (rho.tanh() + 1.0)
}

/// `log(1 − tanh²u)` without cancellation.
fn log_one_minus_tanh2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Samples `a = tanh(μ + σ ξ)` for every row of the head output.
pub fn squash_sample(raw: &Array2<f64>, action_dim: usize, noise: Array2<f64>) -> Squashed {
    let n = raw.nrows();
    let mut action = Array2::zeros((n, action_dim));
    let mut log_prob = vec![0.0; n];
    for i in 0..n {
        for k in 0..action_dim {
            let mu = raw[[i, k]];
            let ls = log_std(raw[[i, action_dim + k]]);
            let xi = noise[[i, k]];
            let u = mu + ls.exp() * xi;
            action[[i, k]] = u.tanh();
            log_prob[i] += -0.5 * xi * xi - ls - HALF_LN_2PI - log_one_minus_tanh2(u);
        }
    }
    Squashed {
        action,
        log_prob,
        raw: raw.clone(),
        noise,
    }
}

/// Gradient w.r.t. the head output given `∂L/∂a` and `∂L/∂log π` per row.
pub fn squash_backward(sq: &Squashed, g_action: &Array2<f64>, g_logp: &[f64]) -> Array2<f64> {
    let ad = sq.action.ncols();
    let mut g = Array2::zeros(sq.raw.dim());
    for i in 0..sq.raw.nrows() {
        for k in 0..ad {
            let rho = sq.raw[[i, ad + k]];
            let sigma = log_std(rho).exp();
            let a = sq.action[[i, k]];
            let xi = sq.noise[[i, k]];
            let gu = g_action[[i, k]] * (1.0 - a * a) + g_logp[i] * 2.0 * a;
            g[[i, k]] = gu;
            let g_ls = gu * sigma * xi - g_logp[i];
            let t = rho.tanh();
            g[[i, ad + k]] = g_ls * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t);
        }
    }
    g
}

impl Actor {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &AgentConfig, rng: &mut Rng) -> Self {
        let encoder = cfg.encoder.build(obs_dim, cfg.slope, rng);
        let head = Mlp::new(
            cfg.encoder.out,
            &cfg.head_widths,
            2 * action_dim,
            cfg.head_layer_norm,
            cfg.slope,
            rng,
        );
        Self {
            encoder,
            head,
            action_dim,
        }
    }

    pub fn noise(&self, rows: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.action_dim), |_| StandardNormal.sample(rng))
    }

    /// Action from one encoder feature vector.
    pub fn act_from_feature(&self, z: &[f64], mode: ActMode, rng: &mut Rng) -> Vec<f64> {
        let raw = self
            .head
            .predict(&Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
        match mode {
            ActMode::Deterministic => raw.slice(s![0, ..self.action_dim]).iter().map(|m| m.tanh()).collect(),
            ActMode::Stochastic => {
                let n = self.noise(1, rng);
                squash_sample(&raw, self.action_dim, n).action.row(0).to_vec()
            }
        }
    }
}

impl Params for Actor {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.encoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    /// Finite differences over the head output of `Σ c·a + Σ d·log π`.
    #[test]
    fn squash_gradient() {
        let mut rng = stream(0, Stream::Init, &[]);
        let raw = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.5..1.5));
        let noise = Array2::from_shape_fn((3, 2), |_| rng.random_range(-2.0..2.0));
        let ca = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let cl: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |r: &Array2<f64>| {
            let sq = squash_sample(r, 2, noise.clone());
            (&sq.action * &ca).sum() + sq.log_prob.iter().zip(&cl).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = squash_backward(&squash_sample(&raw, 2, noise.clone()), &ca, &cl);
        let h = 1e-6;
        for idx in 0..12 {
            let (i, j) = (idx / 4, idx % 4);
            let mut p = raw.clone();
            p[[i, j]] += h;
            let mut m = raw.clone();
            m[[i, j]] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - g[[i, j]]).abs() < 1e-6 * (1.0 + num.abs()), "{idx}: {num} vs {}", g[[i, j]]);
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        // One dimension, μ = 0.3, log σ = log_std(0.2), ξ = 0.7.
        let rho = 0.2;
        let raw = ndarray::array![[0.3, rho]];
        let sq = squash_sample(&raw, 1, ndarray::array![[0.7]]);
        let sigma = log_std(rho).exp();
        let u: f64 = 0.3 + sigma * 0.7;
        let gauss = (-0.5 * 0.7f64 * 0.7).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let expected = (gauss / (1.0 - u.tanh().powi(2))).ln();
        assert!((sq.log_prob[0] - expected).abs() < 1e-10);
    }
}
