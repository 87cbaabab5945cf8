//! Gaussian MLP regressors trained by maximum likelihood, pooled and ranked.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{sigmoid, softplus, AdamW, Mlp, Params, DEFAULT_SLOPE};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub layer_norm: bool,
    pub slope: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 64,
            layer_norm: true,
            slope: DEFAULT_SLOPE,
            log_std_min: -10.0,
            log_std_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Mse,
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Improvement {
    /// New best must be below `best·(1 − r)`.
    Relative(f64),
    /// New best must be below `best − a`.
    Absolute(f64),
}

impl Improvement {
    fn improves(&self, candidate: f64, best: f64) -> bool {
        match *self {
            Improvement::Relative(r) => candidate < best * (1.0 - r),
            Improvement::Absolute(a) => candidate < best - a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improvement: Improvement,
    /// Upper bound on validation transitions.
    pub val_size: usize,
    /// Upper bound on the validation share when the dataset is small.
    pub val_fraction: f64,
    pub criterion: Criterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-5,
            batch_size: 256,
            max_epochs: 200,
            patience: 5,
            improvement: Improvement::Relative(0.01),
            val_size: 1000,
            val_fraction: 0.2,
            criterion: Criterion::Mse,
        }
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with std below 1e-8 get std 1 so they pass through centred.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let std = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| {
                let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            std,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        (x - &m) / &s
    }

    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        z * &s + &m
    }
}

/// `(μ, log σ)` heads in standardized units, with log σ softly clamped.
pub fn split_heads(raw: &Array2<f64>, out_dim: usize, lo: f64, hi: f64) -> (Array2<f64>, Array2<f64>) {
    let mu = raw.slice(s![.., ..out_dim]).to_owned();
    let ls = raw.slice(s![.., out_dim..]).mapv(|r| soft_clamp(r, lo, hi));
    (mu, ls)
}

/// Two softplus hinges; the final hard clamp only trims the ~1e-5 overshoot
/// the hinges leave near the bounds.
pub fn soft_clamp(r: f64, lo: f64, hi: f64) -> f64 {
    let a = hi - softplus(hi - r);
    (lo + softplus(a - lo)).clamp(lo, hi)
}

pub fn soft_clamp_grad(r: f64, lo: f64, hi: f64) -> f64 {
    let a = hi - softplus(hi - r);
    let v = lo + softplus(a - lo);
    if v > hi {
        return 0.0;
    }
    sigmoid(hi - r) * sigmoid(a - lo)
}

/// Mean Gaussian NLL over rows (summed over dimensions, constant dropped) and
/// its gradient w.r.t. the raw network output.
pub fn nll_and_grad(raw: &Array2<f64>, y: &Array2<f64>, lo: f64, hi: f64) -> (f64, Array2<f64>) {
    let d = y.ncols();
    let n = y.nrows() as f64;
    let mut grad = Array2::zeros(raw.dim());
    let mut total = 0.0;
    for i in 0..y.nrows() {
        for j in 0..d {
            let mu = raw[[i, j]];
            let r = raw[[i, d + j]];
            let ls = soft_clamp(r, lo, hi);
            let inv_var = (-2.0 * ls).exp();
            let e = y[[i, j]] - mu;
            total += 0.5 * e * e * inv_var + ls;
            grad[[i, j]] = -e * inv_var / n;
            grad[[i, d + j]] = (1.0 - e * e * inv_var) * soft_clamp_grad(r, lo, hi) / n;
        }
    }
    (total / n, grad)
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub index: usize,
    pub net: Mlp,
    pub val_mse: f64,
    pub val_nll: f64,
    pub epochs: usize,
    /// Set when training hit a non-finite loss; the member ranks last.
    pub diverged: bool,
}

impl TrainedMember {
    pub fn score(&self, c: Criterion) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        match c {
            Criterion::Mse => self.val_mse,
            Criterion::Nll => self.val_nll,
        }
    }
}

/// Standardized training data shared by every pool member.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub x_train: Array2<f64>,
    pub y_train: Array2<f64>,
    pub x_val: Array2<f64>,
    pub y_val: Array2<f64>,
    pub in_stats: Standardizer,
    pub out_stats: Standardizer,
}

impl RegressionData {
    /// Splits raw rows into train/validation with the `Split` stream of `seed`,
    /// fits statistics on the training rows and standardizes both parts.
    pub fn new(x: &Array2<f64>, y: &Array2<f64>, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if n != y.nrows() {
            return Err(Error::Dimension(format!("{n} inputs vs {} targets", y.nrows())));
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "{n} transition(s): need at least 2 to hold out a validation split"
            )));
        }
        let by_fraction = ((n as f64) * cfg.val_fraction).floor() as usize;
        let n_val = cfg.val_size.min(by_fraction).clamp(1, n - 1);
        if n_val < cfg.val_size {
            log::warn!("validation split shrunk to {n_val} of {n} transitions");
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, Stream::Split, &[]));
        let (val, train) = idx.split_at(n_val);
        let xt = x.select(Axis(0), train);
        let yt = y.select(Axis(0), train);
        let in_stats = Standardizer::fit(&xt);
        let out_stats = Standardizer::fit(&yt);
        Ok(Self {
            x_train: in_stats.apply(&xt),
            y_train: out_stats.apply(&yt),
            x_val: in_stats.apply(&x.select(Axis(0), val)),
            y_val: out_stats.apply(&y.select(Axis(0), val)),
            in_stats,
            out_stats,
        })
    }
}

/// Validation MSE (mean over rows and dims) and NLL in standardized units.
pub fn evaluate(net: &Mlp, cfg: &ModelConfig, x: &Array2<f64>, y: &Array2<f64>) -> (f64, f64) {
    let raw = net.predict(x);
    let d = y.ncols();
    let mse = (&raw.slice(s![.., ..d]) - y).mapv(|e| e * e).mean().unwrap_or(f64::NAN);
    let (nll, _) = nll_and_grad(&raw, y, cfg.log_std_min, cfg.log_std_max);
    (mse, nll)
}

pub fn train_member(index: usize, data: &RegressionData, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> TrainedMember {
    let mut rng = rng::stream(seed, Stream::Member, &[index as u64]);
    let in_dim = data.x_train.ncols();
    let out_dim = data.y_train.ncols();
    let widths = vec![model.width; model.hidden_layers];
    let mut net = Mlp::new(in_dim, &widths, 2 * out_dim, model.layer_norm, model.slope, &mut rng);
    let mut opt = AdamW::new(cfg.weight_decay);
    let (mut best_mse, mut best_nll) = evaluate(&net, model, &data.x_val, &data.y_val);
    let mut best = net.flat_values();
    let mut since = 0;
    let mut epochs = 0;
    let n = data.x_train.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = data.x_train.select(Axis(0), chunk);
            let yb = data.y_train.select(Axis(0), chunk);
            net.zero_grad();
            let (raw, cache) = net.forward(&xb);
            let (loss, g) = nll_and_grad(&raw, &yb, model.log_std_min, model.log_std_max);
            if !loss.is_finite() {
                log::warn!("member {index}: non-finite training loss at epoch {epochs}; aborted");
                net.set_flat_values(&best);
                return TrainedMember {
                    index,
                    net,
                    val_mse: best_mse,
                    val_nll: best_nll,
                    epochs,
                    diverged: true,
                };
            }
            net.backward(&cache, &g, true);
            opt.step(&mut net, cfg.lr);
        }
        let (mse, nll) = evaluate(&net, model, &data.x_val, &data.y_val);
        let cand = match cfg.criterion {
            Criterion::Mse => (mse, best_mse),
            Criterion::Nll => (nll, best_nll),
        };
        if cfg.improvement.improves(cand.0, cand.1) {
            best_mse = mse;
            best_nll = nll;
            best = net.flat_values();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    net.set_flat_values(&best);
    TrainedMember {
        index,
        net,
        val_mse: best_mse,
        val_nll: best_nll,
        epochs,
        diverged: false,
    }
}

/// Trains `pool_size` members independently, each on its own random stream.
pub fn train_pool(
    data: &RegressionData,
    pool_size: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<TrainedMember>> {
    if pool_size == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    let pool: Vec<TrainedMember> = (0..pool_size)
        .into_par_iter()
        .map(|i| train_member(i, data, model, cfg, seed))
        .collect();
    if pool.iter().all(|m| m.diverged) {
        return Err(Error::NonFinite("every pool member diverged".into()));
    }
    Ok(pool)
}

/// Indices of the `n` best scores, ascending; ties go to the lower index.
pub fn select_top_indices(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > scores.len() {
        return Err(Error::invalid(format!("cannot select {n} of a pool of {}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::rng::stream;
    use rand::Rng as _;

    #[test]
    fn selection_examples() {
        assert_eq!(select_top_indices(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_indices(&[1.0, 1.0], 1).unwrap(), vec![0]);
        assert_eq!(select_top_indices(&[3.0, 1.0, 2.0], 3).unwrap(), vec![1, 2, 0]);
        assert!(select_top_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = stream(11, Stream::Init, &[]);
        let cfg = ModelConfig::default();
        let mut net = Mlp::new(3, &[8, 8], 4, true, cfg.slope, &mut rng);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
        let y = Array2::from_shape_fn((6, 2), |_| rng.random_range(-2.0..2.0));
        let r = gradcheck(
            &mut net,
            |m| nll_and_grad(&m.predict(&x), &y, cfg.log_std_min, cfg.log_std_max).0,
            |m| {
                let (raw, cache) = m.forward(&x);
                let (_, g) = nll_and_grad(&raw, &y, cfg.log_std_min, cfg.log_std_max);
                m.backward(&cache, &g, true);
            },
            1e-5,
            1e-6,
        );
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn soft_clamp_stays_in_range() {
        for r in [-1e3, -20.0, -10.0, 0.0, 0.5, 3.0, 1e3] {
            let v = soft_clamp(r, -10.0, 0.5);
            assert!((-10.0..=0.5).contains(&v), "{r} -> {v}");
        }
    }
}
