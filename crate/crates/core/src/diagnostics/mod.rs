//! Analysis artifacts: the open-loop compounding-error study, the
//! layer-norm growth bound, the bootstrapped backup bound on a tabular
//! chain, and value-overestimation series from training metrics.

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::OfflineDataset;
use crate::rng::{stream, Stream};
use crate::stats;
use crate::trainer::MetricsRecord;
use crate::world::WorldEnsemble;
use crate::{Error, Result};

pub const DEFAULT_ROLLOUTS: usize = 200;

/// Replaces every `None` after the first `Some` by the last seen value.
/// Leading `None`s stay missing.
pub fn forward_fill(series: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut last = None;
    series
        .iter()
        .map(|v| {
            if v.is_some() {
                last = *v;
            }
            last
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Median and 5–95% band of each column of `rows` (one row per rollout).
pub fn bands(rows: &[Vec<f64>]) -> Result<Vec<Band>> {
    let len = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::invalid("band series have unequal lengths"));
    }
    (0..len)
        .map(|t| {
            let col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
            Ok(Band {
                median: stats::percentile_linear(&col, 0.5)?,
                lo: stats::percentile_linear(&col, 0.05)?,
                hi: stats::percentile_linear(&col, 0.95)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSeries {
    pub model_index: usize,
    pub trajectory: usize,
    pub state_rmse: Vec<f64>,
    pub state_rms: Vec<f64>,
    pub reward_bias: Vec<f64>,
    pub uncertainty: Vec<f64>,
    /// Steps completed before a non-finite prediction, if any.
    pub finite_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundingReport {
    pub state_rmse: Vec<Band>,
    pub state_rms: Vec<Band>,
    pub reward_bias: Vec<Band>,
    /// `(U(ŝ_t, a_t), RMSE(ŝ_{t+1}, s_{t+1}))` for every step of every rollout.
    pub scatter: Vec<(f64, f64)>,
    pub spearman: f64,
    pub rollouts: Vec<OpenLoopSeries>,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Replays a real trajectory's actions through one member from its real
/// initial state, sampling each step from the member's Gaussian.
fn open_loop_rollout(
    world: &WorldEnsemble,
    ds: &OfflineDataset,
    model_index: usize,
    trajectory: usize,
    max_steps: usize,
    rng: &mut crate::rng::Rng,
) -> OpenLoopSeries {
    let tr = ds.trajectory(trajectory);
    let steps = tr.len().min(max_steps);
    let mut out = OpenLoopSeries {
        model_index,
        trajectory,
        state_rmse: Vec::with_capacity(steps),
        state_rms: Vec::with_capacity(steps),
        reward_bias: Vec::with_capacity(steps),
        uncertainty: Vec::with_capacity(steps),
        finite_steps: steps,
    };
    let mut s = tr.states[0].clone();
    for t in 0..steps {
        let q = match world.query(model_index, &s, &tr.actions[t]) {
            Ok(q) if q.uncertainty.is_finite() => q,
            _ => {
                out.finite_steps = t;
                break;
            }
        };
        let (r, s2) = WorldEnsemble::sample(&q.prediction, rng);
        if !r.is_finite() || s2.iter().any(|v| !v.is_finite()) {
            out.finite_steps = t;
            break;
        }
        out.state_rmse.push(rmse(&s2, &tr.states[t + 1]));
        out.state_rms.push(rms(&s2));
        out.reward_bias.push(r - tr.rewards[t]);
        out.uncertainty.push(q.uncertainty);
        s = s2;
    }
    out
}

fn filled(series: &[f64], len: usize) -> Vec<f64> {
    let opt: Vec<Option<f64>> = (0..len).map(|t| series.get(t).copied()).collect();
    forward_fill(&opt).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()
}

/// Open-loop compounding study over `n_rollouts` (member, trajectory) draws.
/// Rollouts that hit a non-finite value are forward-filled.
pub fn open_loop_eval(
    world: &WorldEnsemble,
    eval: &OfflineDataset,
    n_rollouts: usize,
    max_steps: usize,
    seed: u64,
) -> Result<CompoundingReport> {
    if n_rollouts == 0 || max_steps == 0 {
        return Err(Error::invalid("need at least one rollout of at least one step"));
    }
    if eval.state_dim() != world.state_dim || eval.action_dim() != world.action_dim {
        return Err(Error::invalid("evaluation dataset does not match the ensemble"));
    }
    let rollouts: Vec<OpenLoopSeries> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Stream::Diagnostics, &[i as u64]);
            let m = rng.random_range(0..world.len());
            let j = rng.random_range(0..eval.trajectories().len());
            open_loop_rollout(world, eval, m, j, max_steps, &mut rng)
        })
        .collect();
    let len = rollouts
        .iter()
        .map(|r| eval.trajectory(r.trajectory).len().min(max_steps))
        .max()
        .unwrap_or(0);
    if rollouts.iter().any(|r| r.state_rmse.is_empty()) {
        return Err(Error::NonFinite("open-loop rollout diverged on its first step".into()));
    }
    let pick = |f: &dyn Fn(&OpenLoopSeries) -> &Vec<f64>| -> Vec<Vec<f64>> {
        rollouts.iter().map(|r| filled(f(r), len)).collect()
    };
    let scatter: Vec<(f64, f64)> = rollouts
        .iter()
        .flat_map(|r| r.uncertainty.iter().copied().zip(r.state_rmse.iter().copied()))
        .collect();
    let (us, es): (Vec<f64>, Vec<f64>) = scatter.iter().copied().unzip();
    Ok(CompoundingReport {
        state_rmse: bands(&pick(&|r| &r.state_rmse))?,
        state_rms: bands(&pick(&|r| &r.state_rms))?,
        reward_bias: bands(&pick(&|r| &r.reward_bias))?,
        spearman: stats::spearman(&us, &es),
        scatter,
        rollouts,
    })
}

impl CompoundingReport {
    pub fn bands_csv(&self) -> String {
        let mut s = String::from(
            "step,rmse_median,rmse_p05,rmse_p95,rms_median,rms_p05,rms_p95,reward_bias_median,reward_bias_p05,reward_bias_p95\n",
        );
        for t in 0..self.state_rmse.len() {
            let (a, b, c) = (self.state_rmse[t], self.state_rms[t], self.reward_bias[t]);
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                t + 1,
                a.median,
                a.lo,
                a.hi,
                b.median,
                b.lo,
                b.hi,
                c.median,
                c.lo,
                c.hi
            ));
        }
        s
    }

    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("uncertainty,next_state_rmse\n");
        for (u, e) in &self.scatter {
            s.push_str(&format!("{u},{e}\n"));
        }
        s
    }

    /// Linear percentile of the per-rollout state RMSE at step `h` (1-based).
    pub fn rmse_percentile_at(&self, h: usize, q: f64) -> Result<f64> {
        let len = self.state_rmse.len();
        if h == 0 || h > len {
            return Err(Error::invalid(format!("step {h} outside 1..={len}")));
        }
        let col: Vec<f64> = self.rollouts.iter().map(|r| filled(&r.state_rmse, len)[h - 1]).collect();
        stats::percentile_linear(&col, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub rollouts: usize,
    pub steps: usize,
    pub checks: usize,
    pub violations: usize,
    /// Largest `‖μ_t − s_0‖ / (t · bound)` seen.
    pub max_ratio: f64,
}

/// Mean-propagated open-loop rollouts under uniform random actions from
/// dataset states: checks `‖μ_t − s_0‖ ≤ t · ln_step_bound(m)` after every
/// step `t ≤ steps`. Each member runs its share of rollouts as one batch.
pub fn ln_growth_check(
    world: &WorldEnsemble,
    ds: &OfflineDataset,
    rollouts: usize,
    steps: usize,
    seed: u64,
) -> Result<GrowthCheck> {
    if !world.layer_norm() {
        return Err(Error::invalid("the growth bound needs a layer-normalized ensemble"));
    }
    let sd = world.state_dim;
    let ad = world.action_dim;
    let results: Vec<(usize, usize, f64)> = (0..world.len())
        .into_par_iter()
        .map(|m| {
            let n = rollouts / world.len() + usize::from(m < rollouts % world.len());
            let mut rng = stream(seed, Stream::Diagnostics, &[u64::MAX, m as u64]);
            let bound = world.ln_step_bound(m);
            let starts: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let h = ds.sample_history(&mut rng);
                    ds.trajectory(h.trajectory).states[h.t].clone()
                })
                .collect();
            let mut s = Array2::from_shape_fn((n, sd), |(i, j)| starts[i][j]);
            let (mut checks, mut violations, mut worst) = (0, 0, 0.0f64);
            for t in 1..=steps {
                let x = Array2::from_shape_fn((n, sd + ad), |(i, j)| {
                    if j < sd {
                        s[[i, j]]
                    } else {
                        rng.random_range(-1.0..=1.0)
                    }
                });
                let (mu, _) = world.ensemble.predict(m, &x);
                for i in 0..n {
                    for j in 0..sd {
                        s[[i, j]] += mu[[i, 1 + j]];
                    }
                    let dist = (0..sd).map(|j| (s[[i, j]] - starts[i][j]).powi(2)).sum::<f64>().sqrt();
                    let cap = t as f64 * bound;
                    checks += 1;
                    if !(dist <= cap) {
                        violations += 1;
                    }
                    if cap > 0.0 {
                        worst = worst.max(dist / cap);
                    }
                }
            }
            (checks, violations, worst)
        })
        .collect();
    Ok(GrowthCheck {
        rollouts,
        steps,
        checks: results.iter().map(|r| r.0).sum(),
        violations: results.iter().map(|r| r.1).sum(),
        max_ratio: results.iter().map(|r| r.2).fold(0.0, f64::max),
    })
}

/// `Σ_{j<H} γ^j δ_j + γ^H ε` with `H = deltas.len()`; `deltas[j]` caps the
/// TD error of the backup `j` steps from the root.
pub fn backup_bound(gamma: f64, deltas: &[f64], eps: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) || deltas.is_empty() {
        return Err(Error::invalid("need γ ∈ (0, 1) and H ≥ 1"));
    }
    let mut w = 1.0;
    let mut total = 0.0;
    for d in deltas {
        total += w * d;
        w *= gamma;
    }
    Ok(total + w * eps)
}

/// Deterministic ring of `rewards.len()` states under a single action:
/// `s → s + 1 (mod L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdp {
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl ChainMdp {
    /// `Q^π(s)` from the periodic closed form.
    pub fn q(&self, s: usize) -> f64 {
        let l = self.rewards.len();
        let mut total = 0.0;
        let mut w = 1.0;
        for k in 0..l {
            total += w * self.rewards[(s + k) % l];
            w *= self.gamma;
        }
        total / (1.0 - w)
    }

    /// Backs up `H = deltas.len()` steps from `start` towards the root,
    /// starting from a bootstrap value off by `bootstrap_error` and adding
    /// `td_errors[j]` to the backup `j` steps from the root. Returns the
    /// realized `|Q_H(start) − Q^π(start)|`.
    pub fn realized_error(&self, start: usize, td_errors: &[f64], bootstrap_error: f64) -> f64 {
        let l = self.rewards.len();
        let h = td_errors.len();
        let mut q = self.q((start + h) % l) + bootstrap_error;
        for j in (0..h).rev() {
            q = self.rewards[(start + j) % l] + self.gamma * q + td_errors[j];
        }
        (q - self.q(start)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackupRow {
    pub gamma: f64,
    pub horizon: usize,
    pub delta: f64,
    pub eps: f64,
    pub bound: f64,
    pub realized_max: f64,
    pub violations: usize,
}

/// Grid over `γ`, `H ∈ 1..=max_h`, `δ` and `ε`. Each cell draws `trials`
/// random chains and error signs, plus the adversarial all-same-sign case.
pub fn backup_bound_grid(
    gammas: &[f64],
    max_h: usize,
    deltas: &[f64],
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<BackupRow>> {
    let mut rows = Vec::new();
    let mut rng = stream(seed, Stream::Diagnostics, &[0xB0]);
    for &gamma in gammas {
        for h in 1..=max_h {
            for &delta in deltas {
                for &eps in epsilons {
                    let bound = backup_bound(gamma, &vec![delta; h], eps)?;
                    let mut realized_max: f64 = 0.0;
                    let mut violations = 0;
                    for trial in 0..=trials {
                        let l = rng.random_range(2..=20);
                        let chain = ChainMdp {
                            rewards: (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect(),
                            gamma,
                        };
                        let (td, boot): (Vec<f64>, f64) = if trial == 0 {
                            (vec![delta; h], eps)
                        } else {
                            (
                                (0..h).map(|_| delta * rng.random_range(-1.0..=1.0)).collect(),
                                eps * rng.random_range(-1.0..=1.0),
                            )
                        };
                        let e = chain.realized_error(rng.random_range(0..l), &td, boot);
                        realized_max = realized_max.max(e);
                        // Rounding in Q^π and the backups is far below this slack.
                        if e > bound + 1e-9 * (1.0 + bound) {
                            violations += 1;
                        }
                    }
                    rows.push(BackupRow {
                        gamma,
                        horizon: h,
                        delta,
                        eps,
                        bound,
                        realized_max,
                        violations,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn backup_csv(rows: &[BackupRow]) -> String {
    let mut s = String::from("gamma,horizon,delta,eps,bound,realized_max,violations\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.gamma, r.horizon, r.delta, r.eps, r.bound, r.realized_max, r.violations
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverestimationPoint {
    pub step: u64,
    pub dataset_q: f64,
    pub true_discounted: f64,
    /// `(Q − J) / |J|`; positive means the critic overestimates.
    pub ratio: f64,
}

/// Pairs logged dataset Q-values with the evaluated discounted return.
pub fn overestimation_track(records: &[MetricsRecord]) -> Vec<OverestimationPoint> {
    records
        .iter()
        .filter(|r| r.dataset_q.is_finite() && r.eval_discounted.is_finite())
        .map(|r| OverestimationPoint {
            step: r.step,
            dataset_q: r.dataset_q,
            true_discounted: r.eval_discounted,
            ratio: (r.dataset_q - r.eval_discounted) / r.eval_discounted.abs().max(1e-8),
        })
        .collect()
}

pub fn overestimation_csv(points: &[OverestimationPoint]) -> String {
    let mut s = String::from("step,dataset_q,true_discounted,ratio\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.step, p.dataset_q, p.true_discounted, p.ratio));
    }
    s
}
