use ndarray::{concatenate, s, Array2, Axis};

use super::AgentConfig;
use crate::nn::{LruEncoder, Mlp, MlpCache, Params};
use crate::rng::Rng;

/// Shared history encoder with independent `Q(z, a)` heads.
#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    pub encoder: LruEncoder,
    pub heads: Vec<Mlp>,
}

impl CriticEnsemble {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &AgentConfig, rng: &mut Rng) -> Self {
        let encoder = cfg.encoder.build(obs_dim, cfg.slope, rng);
        let heads = (0..cfg.n_critics)
            .map(|_| {
                Mlp::new(
                    cfg.encoder.out + action_dim,
                    &cfg.head_widths,
                    1,
                    cfg.head_layer_norm,
                    cfg.slope,
                    rng,
                )
            })
            .collect();
        Self { encoder, heads }
    }

    pub fn head_input(z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[z.view(), a.view()]).expect("row counts agree")
    }

    /// Forward of head `k`; returns the Q column and its cache.
    pub fn head_forward(&self, k: usize, x: &Array2<f64>) -> (Vec<f64>, MlpCache) {
        let (q, c) = self.heads[k].forward(x);
        (q.column(0).to_vec(), c)
    }

    pub fn q_all(&self, x: &Array2<f64>) -> Vec<Vec<f64>> {
        self.heads.iter().map(|h| h.predict(x).column(0).to_vec()).collect()
    }

    /// Splits a head-input gradient into its feature and action parts.
    pub fn split_input_grad(g: &Array2<f64>, z_dim: usize) -> (Array2<f64>, Array2<f64>) {
        (g.slice(s![.., ..z_dim]).to_owned(), g.slice(s![.., z_dim..]).to_owned())
    }
}

impl Params for CriticEnsemble {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.encoder.visit(f);
        self.heads.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

/// `Q = V + A − mean(A)` over discrete actions.
#[derive(Debug, Clone)]
pub struct DuelingCritic {
    pub encoder: LruEncoder,
    /// Outputs `[V, A_0, …, A_{n−1}]`.
    pub head: Mlp,
    pub n_actions: usize,
}

pub fn dueling_combine(raw: &Array2<f64>) -> Array2<f64> {
    let n = raw.ncols() - 1;
    let mut q = Array2::zeros((raw.nrows(), n));
    for (i, row) in raw.axis_iter(Axis(0)).enumerate() {
        let mean_a = row.slice(s![1..]).sum() / n as f64;
        for a in 0..n {
            q[[i, a]] = row[0] + row[1 + a] - mean_a;
        }
    }
    q
}

/// Gradient w.r.t. `[V, A]` given `∂L/∂Q`.
pub fn dueling_backward(g_q: &Array2<f64>) -> Array2<f64> {
    let n = g_q.ncols();
    let mut g = Array2::zeros((g_q.nrows(), n + 1));
    for (i, row) in g_q.axis_iter(Axis(0)).enumerate() {
        let total = row.sum();
        g[[i, 0]] = total;
        for a in 0..n {
            g[[i, 1 + a]] = row[a] - total / n as f64;
        }
    }
    g
}

impl DuelingCritic {
    pub fn new(obs_dim: usize, n_actions: usize, cfg: &AgentConfig, rng: &mut Rng) -> Self {
        let encoder = cfg.encoder.build(obs_dim, cfg.slope, rng);
        let head = Mlp::new(
            cfg.encoder.out,
            &cfg.head_widths,
            1 + n_actions,
            cfg.head_layer_norm,
            cfg.slope,
            rng,
        );
        Self {
            encoder,
            head,
            n_actions,
        }
    }

    pub fn q_from_features(&self, z: &Array2<f64>) -> Array2<f64> {
        dueling_combine(&self.head.predict(z))
    }
}

impl Params for DuelingCritic {
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
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dueling_identity(vals in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let raw = Array2::from_shape_vec((1, 4), vals.clone()).unwrap();
            let q = dueling_combine(&raw);
            let mean_a = (vals[1] + vals[2] + vals[3]) / 3.0;
            for a in 0..3 {
                prop_assert!((q[[0, a]] - (vals[0] + vals[1 + a] - mean_a)).abs() < 1e-6);
            }
        }
    }
}
