//! Ensembles of Gaussian predictors standing in for the posterior over models.
//!
//! [`GaussianEnsemble`] is the generic `x → N(μ, σ²)` ensemble with shared
//! standardization; [`WorldEnsemble`] gives it world-model meaning, mapping
//! `(s, a)` to `(r, s' − s)`.

mod gaussian;

pub use gaussian::{
    evaluate, nll_and_grad, select_top_indices, soft_clamp, soft_clamp_grad, train_member, train_pool,
    Criterion, Improvement, ModelConfig, RegressionData, Standardizer, TrainConfig, TrainedMember,
};

use std::path::Path;

use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::OfflineDataset;
use crate::nn::{Mlp, Params};
use crate::rng::Rng;
use crate::{ckpt, stats, Error, Result};

#[derive(Debug, Clone)]
pub struct GaussianEnsemble {
    pub members: Vec<Mlp>,
    pub in_stats: Standardizer,
    pub out_stats: Standardizer,
    pub scores: Vec<f64>,
    /// Index of each member in the pool it was selected from.
    pub pool_indices: Vec<usize>,
    pub pool_size: usize,
    pub model: ModelConfig,
    pub criterion: Criterion,
    /// Output dimensions that enter the disagreement measure.
    pub unc_mask: Vec<bool>,
}

/// Population standard deviation across members per dimension, combined by
/// the ℓ2 norm over the masked dimensions.
pub fn disagreement(means: &[&[f64]], mask: &[bool]) -> f64 {
    let n = means.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (d, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let mu = means.iter().map(|m| m[d]).sum::<f64>() / n as f64;
        total += means.iter().map(|m| (m[d] - mu) * (m[d] - mu)).sum::<f64>() / n as f64;
    }
    total.sqrt()
}

impl GaussianEnsemble {
    /// Trains a pool and keeps the best `n` members.
    pub fn fit(
        x: &Array2<f64>,
        y: &Array2<f64>,
        pool_size: usize,
        n: usize,
        model: &ModelConfig,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if n > pool_size {
            return Err(Error::invalid(format!("cannot select {n} of a pool of {pool_size}")));
        }
        let data = RegressionData::new(x, y, cfg, seed)?;
        let pool = train_pool(&data, pool_size, model, cfg, seed)?;
        Self::from_pool(pool, n, cfg.criterion, &data, model)
    }

    pub fn from_pool(
        pool: Vec<TrainedMember>,
        n: usize,
        criterion: Criterion,
        data: &RegressionData,
        model: &ModelConfig,
    ) -> Result<Self> {
        let scores: Vec<f64> = pool.iter().map(|m| m.score(criterion)).collect();
        let keep = select_top_indices(&scores, n)?;
        let pool_size = pool.len();
        let mut slots: Vec<Option<TrainedMember>> = pool.into_iter().map(Some).collect();
        let members: Vec<TrainedMember> = keep.iter().map(|&i| slots[i].take().unwrap()).collect();
        Ok(Self {
            scores: keep.iter().map(|&i| scores[i]).collect(),
            pool_indices: keep,
            pool_size,
            members: members.into_iter().map(|m| m.net).collect(),
            in_stats: data.in_stats.clone(),
            out_stats: data.out_stats.clone(),
            model: model.clone(),
            criterion,
            unc_mask: vec![true; data.out_stats.dim()],
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.in_stats.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out_stats.dim()
    }

    /// Standardized `(μ, log σ)` of member `m` for raw inputs `x`.
    pub fn member_standardized(&self, m: usize, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let raw = self.members[m].predict(&self.in_stats.apply(x));
        gaussian::split_heads(&raw, self.output_dim(), self.model.log_std_min, self.model.log_std_max)
    }

    /// Destandardized mean and standard deviation of member `m`.
    pub fn predict(&self, m: usize, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (mu, ls) = self.member_standardized(m, x);
        let sd = ndarray::Array1::from(self.out_stats.std.clone());
        (self.out_stats.invert(&mu), ls.mapv(f64::exp) * &sd)
    }

    /// Uncertainty of every row of `x`.
    pub fn uncertainty_batch(&self, x: &Array2<f64>) -> Vec<f64> {
        let means: Vec<Array2<f64>> = (0..self.len()).map(|m| self.member_standardized(m, x).0).collect();
        (0..x.nrows())
            .map(|i| {
                let rows: Vec<&[f64]> = means
                    .iter()
                    .map(|mu| mu.row(i).to_slice().expect("contiguous"))
                    .collect();
                disagreement(&rows, &self.unc_mask)
            })
            .collect()
    }

    pub fn uncertainty(&self, x: &[f64]) -> f64 {
        self.uncertainty_batch(&row(x))[0]
    }

    fn arrays(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(|m| m.flat_values()).collect()
    }
}

fn row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// `(s, a) → (r, s' − s)` ensemble.
#[derive(Debug, Clone)]
pub struct WorldEnsemble {
    pub ensemble: GaussianEnsemble,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldPrediction {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub next_state_mean: Vec<f64>,
    pub next_state_std: Vec<f64>,
}

/// Everything a rollout step needs from one query of the whole ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct StepQuery {
    pub uncertainty: f64,
    pub prediction: WorldPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyThreshold {
    pub zeta: f64,
    pub value: f64,
    pub dataset_mean: f64,
}

impl UncertaintyThreshold {
    /// A threshold that never truncates.
    pub fn infinite() -> Self {
        Self {
            zeta: 1.0,
            value: f64::INFINITY,
            dataset_mean: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub pool_size: usize,
    pub top_n: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub include_reward_in_uncertainty: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            pool_size: 16,
            top_n: 8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            include_reward_in_uncertainty: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    state_dim: usize,
    action_dim: usize,
    members: usize,
    pool_size: usize,
    model: ModelConfig,
    criterion: Criterion,
    in_stats: Standardizer,
    out_stats: Standardizer,
    scores: Vec<f64>,
    pool_indices: Vec<usize>,
    unc_mask: Vec<bool>,
}

const MAGIC: &[u8; 4] = b"NBWE";
const VERSION: u32 = 1;

impl WorldEnsemble {
    pub fn dataset_arrays(ds: &OfflineDataset) -> (Array2<f64>, Array2<f64>) {
        let (sd, ad) = (ds.state_dim(), ds.action_dim());
        let n = ds.num_transitions();
        let mut x = Array2::zeros((n, sd + ad));
        let mut y = Array2::zeros((n, 1 + sd));
        for (i, tr) in ds.transitions().enumerate() {
            for j in 0..sd {
                x[[i, j]] = tr.state[j];
                y[[i, 1 + j]] = tr.next_state[j] - tr.state[j];
            }
            for j in 0..ad {
                x[[i, sd + j]] = tr.action[j];
            }
            y[[i, 0]] = tr.reward;
        }
        (x, y)
    }

    pub fn train(ds: &OfflineDataset, cfg: &EnsembleConfig, seed: u64) -> Result<Self> {
        let (x, y) = Self::dataset_arrays(ds);
        let mut ensemble = GaussianEnsemble::fit(&x, &y, cfg.pool_size, cfg.top_n, &cfg.model, &cfg.train, seed)?;
        ensemble.unc_mask[0] = cfg.include_reward_in_uncertainty;
        Ok(Self {
            ensemble,
            state_dim: ds.state_dim(),
            action_dim: ds.action_dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }

    fn input(&self, s: &[f64], a: &[f64]) -> Result<Array2<f64>> {
        if s.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::Dimension(format!(
                "got state {} / action {}, expected {} / {}",
                s.len(),
                a.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        let mut v = s.to_vec();
        v.extend_from_slice(a);
        Ok(row(&v))
    }

    fn to_prediction(&self, s: &[f64], mean: &[f64], std: &[f64]) -> WorldPrediction {
        WorldPrediction {
            reward_mean: mean[0],
            reward_std: std[0],
            next_state_mean: s.iter().zip(&mean[1..]).map(|(a, b)| a + b).collect(),
            next_state_std: std[1..].to_vec(),
        }
    }

    pub fn predict(&self, m: usize, s: &[f64], a: &[f64]) -> Result<WorldPrediction> {
        let x = self.input(s, a)?;
        let (mu, sd) = self.ensemble.predict(m, &x);
        Ok(self.to_prediction(s, mu.row(0).to_slice().unwrap(), sd.row(0).to_slice().unwrap()))
    }

    pub fn uncertainty(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.ensemble.uncertainty_batch(&self.input(s, a)?)[0])
    }

    /// Uncertainty of `(s, a)` and member `m`'s prediction, one pass per member.
    pub fn query(&self, m: usize, s: &[f64], a: &[f64]) -> Result<StepQuery> {
        let x = self.input(s, a)?;
        let xs = self.ensemble.in_stats.apply(&x);
        let d = self.ensemble.output_dim();
        let (lo, hi) = (self.ensemble.model.log_std_min, self.ensemble.model.log_std_max);
        let raws: Vec<Array2<f64>> = self.ensemble.members.iter().map(|net| net.predict(&xs)).collect();
        let means: Vec<&[f64]> = raws
            .iter()
            .map(|r| &r.as_slice().expect("contiguous")[..d])
            .collect();
        let uncertainty = disagreement(&means, &self.ensemble.unc_mask);
        let (mu, ls) = gaussian::split_heads(&raws[m], d, lo, hi);
        let st = &self.ensemble.out_stats;
        let mean: Vec<f64> = (0..d).map(|j| mu[[0, j]] * st.std[j] + st.mean[j]).collect();
        let std: Vec<f64> = (0..d).map(|j| ls[[0, j]].exp() * st.std[j]).collect();
        Ok(StepQuery {
            uncertainty,
            prediction: self.to_prediction(s, &mean, &std),
        })
    }

    /// Draws `(r̂, ŝ')` from a prediction.
    pub fn sample(pred: &WorldPrediction, rng: &mut Rng) -> (f64, Vec<f64>) {
        let mut z = || -> f64 { StandardNormal.sample(rng) };
        let r = pred.reward_mean + pred.reward_std * z();
        let s2 = pred
            .next_state_mean
            .iter()
            .zip(&pred.next_state_std)
            .map(|(m, sd)| m + sd * z())
            .collect();
        (r, s2)
    }

    pub fn dataset_uncertainties(&self, ds: &OfflineDataset) -> Vec<f64> {
        let (x, _) = Self::dataset_arrays(ds);
        self.ensemble.uncertainty_batch(&x)
    }

    pub fn quantile_threshold(&self, ds: &OfflineDataset, zeta: f64) -> Result<UncertaintyThreshold> {
        threshold_from_values(&self.dataset_uncertainties(ds), zeta)
    }

    pub fn empirical_cdf(&self, ds: &OfflineDataset) -> Result<Vec<(f64, f64)>> {
        stats::normalized_cdf(&self.dataset_uncertainties(ds))
    }

    /// Constants `(a, b)` such that every mean state change of member `m`
    /// satisfies `‖E[ŝ'] − s‖ ≤ a + b` when layer normalization is enabled:
    /// `a = √k·‖diag(σ_Δ) W_Δ‖_op` and `b = ‖σ_Δ ⊙ b_Δ + μ_Δ‖`.
    pub fn ln_step_bound_terms(&self, m: usize) -> (f64, f64) {
        let out = &self.members_out(m);
        let st = &self.ensemble.out_stats;
        let k = out.input_dim() as f64;
        let ds = self.state_dim;
        let mut w = out.w.slice(s![1..1 + ds, ..]).to_owned();
        for j in 0..ds {
            w.row_mut(j).mapv_inplace(|v| v * st.std[1 + j]);
        }
        let op = operator_norm(&w);
        let bias = (0..ds)
            .map(|j| {
                let v = st.std[1 + j] * out.b[1 + j] + st.mean[1 + j];
                v * v
            })
            .sum::<f64>()
            .sqrt();
        (k.sqrt() * op, bias)
    }

    pub fn ln_step_bound(&self, m: usize) -> f64 {
        let (a, b) = self.ln_step_bound_terms(m);
        a + b
    }

    fn members_out(&self, m: usize) -> &crate::nn::Linear {
        &self.ensemble.members[m].out
    }

    pub fn layer_norm(&self) -> bool {
        self.ensemble.model.layer_norm
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let e = &self.ensemble;
        let header = CheckpointHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            members: e.len(),
            pool_size: e.pool_size,
            model: e.model.clone(),
            criterion: e.criterion,
            in_stats: e.in_stats.clone(),
            out_stats: e.out_stats.clone(),
            scores: e.scores.clone(),
            pool_indices: e.pool_indices.clone(),
            unc_mask: e.unc_mask.clone(),
        };
        ckpt::write(path.as_ref(), MAGIC, VERSION, &header, &e.arrays())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, arrays): (CheckpointHeader, _) = ckpt::read(path.as_ref(), MAGIC, VERSION)?;
        if arrays.len() != h.members {
            return Err(Error::Checkpoint(format!("{} weight arrays for {} members", arrays.len(), h.members)));
        }
        let in_dim = h.state_dim + h.action_dim;
        let out_dim = 1 + h.state_dim;
        let widths = vec![h.model.width; h.model.hidden_layers];
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init, &[]);
        let mut members = Vec::with_capacity(h.members);
        for a in &arrays {
            let mut net = Mlp::new(in_dim, &widths, 2 * out_dim, h.model.layer_norm, h.model.slope, &mut rng);
            if net.num_params() != a.len() {
                return Err(Error::Checkpoint("member weight count does not match the architecture".into()));
            }
            net.set_flat_values(a);
            members.push(net);
        }
        Ok(Self {
            ensemble: GaussianEnsemble {
                members,
                in_stats: h.in_stats,
                out_stats: h.out_stats,
                scores: h.scores,
                pool_indices: h.pool_indices,
                pool_size: h.pool_size,
                model: h.model,
                criterion: h.criterion,
                unc_mask: h.unc_mask,
            },
            state_dim: h.state_dim,
            action_dim: h.action_dim,
        })
    }

    /// Flat copy of all member weights, for frozen-posterior checks.
    pub fn fingerprint(&self) -> Vec<f64> {
        self.ensemble.arrays().concat()
    }
}

pub fn threshold_from_values(values: &[f64], zeta: f64) -> Result<UncertaintyThreshold> {
    let value = stats::quantile_nearest_rank(values, zeta)?;
    let mean = stats::mean(values);
    Ok(UncertaintyThreshold {
        zeta,
        value,
        dataset_mean: if mean > 0.0 { mean } else { 1.0 },
    })
}

/// Largest singular value, from the Gram matrix of the shorter side
/// diagonalized by cyclic Jacobi sweeps.
pub fn operator_norm(a: &Array2<f64>) -> f64 {
    let g = if a.nrows() <= a.ncols() { a.dot(&a.t()) } else { a.t().dot(a) };
    symmetric_eigenvalues(&g).into_iter().fold(0.0, f64::max).max(0.0).sqrt()
}

pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn disagreement_examples() {
        let m = [[0.0].as_slice(), [2.0].as_slice()];
        assert_eq!(disagreement(&m, &[true]), 1.0);
        let same = [[0.3, 1.0].as_slice(), [0.3, 1.0].as_slice()];
        assert_eq!(disagreement(&same, &[true, true]), 0.0);
        assert_eq!(disagreement(&[[5.0].as_slice()], &[true]), 0.0);
    }

    #[test]
    fn operator_norm_known_values() {
        assert!((operator_norm(&array![[3.0, 4.0]]) - 5.0).abs() < 1e-12);
        assert!((operator_norm(&array![[2.0, 0.0], [0.0, -7.0]]) - 7.0).abs() < 1e-12);
        let a = array![[1.0, 1.0], [0.0, 1.0]];
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((operator_norm(&a) - golden).abs() < 1e-10);
    }

    #[test]
    fn threshold_at_one_is_maximum() {
        let t = threshold_from_values(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        assert_eq!(t.value, 4.0);
        assert_eq!(t.dataset_mean, 2.5);
    }
}
