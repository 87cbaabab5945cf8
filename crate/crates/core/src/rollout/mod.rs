//! Truncated imagined rollouts from dataset histories.
//!
//! A rollout fixes one ensemble member, warms the policy on the real prefix
//! `h_t`, then alternates acting and stepping that member. It stops on the
//! first of: the terminal function firing, the pre-step pair `(ŝ, â)`
//! exceeding the uncertainty threshold, or the episode clock reaching `T`.

mod tape;

pub use tape::{mixed_loss, mixed_weights, Batch, ReplayTape, Sequence};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{history_obs, History, OfflineDataset, TerminalFn};
use crate::rng::{self, Rng, Stream};
use crate::world::{UncertaintyThreshold, WorldEnsemble};
use crate::{stats, Error, Result};

/// A policy that can be driven step by step through a history.
pub trait RolloutPolicy: Sync {
    type State: Clone + Send;
    fn start(&self) -> Self::State;
    /// Consumes the next history entry `(s_j, a_{j−1}, r_j)`.
    fn observe(&self, state: &mut Self::State, obs: &[f64]);
    fn act(&self, state: &Self::State, rng: &mut Rng) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub k: usize,
    pub threshold: UncertaintyThreshold,
    pub horizon: usize,
    /// Reward penalty λ; zero in the main algorithm.
    pub penalty: f64,
    /// Keep the step whose pre-step uncertainty exceeded the threshold.
    pub keep_truncated_step: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Terminal,
    UncertaintyTruncation,
    Timeout,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Terminal => "terminal",
            StopReason::UncertaintyTruncation => "unc_trunc",
            StopReason::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub terminal: bool,
    pub unc_trunc: bool,
    pub timeout: bool,
}

impl StepFlags {
    pub fn count(&self) -> usize {
        self.terminal as usize + self.unc_trunc as usize + self.timeout as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedTrajectory {
    pub history: History,
    pub model_index: usize,
    /// `â_k` for each imagined step.
    pub actions: Vec<Vec<f64>>,
    /// Stored rewards (penalized when λ > 0).
    pub rewards: Vec<f64>,
    /// `ŝ_{k+1}` for each imagined step.
    pub next_states: Vec<Vec<f64>>,
    /// `U(ŝ_k, â_k)` checked before each step.
    pub uncertainties: Vec<f64>,
    /// Member used for each step (constant; kept for auditing).
    pub step_models: Vec<usize>,
    pub flags: Vec<StepFlags>,
    pub stop: StopReason,
    /// Set when the model produced a non-finite value.
    pub nonfinite: bool,
}

impl ImaginedTrajectory {
    pub fn imagined_len(&self) -> usize {
        self.actions.len()
    }

    pub fn terminal(&self) -> bool {
        self.stop == StopReason::Terminal
    }
}

/// Runs one rollout from `h` with member `model_index`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<P: RolloutPolicy>(
    ds: &OfflineDataset,
    h: History,
    model_index: usize,
    world: &WorldEnsemble,
    terminal_fn: &dyn TerminalFn,
    policy: &P,
    spec: &RolloutSpec,
    rng: &mut Rng,
) -> Result<ImaginedTrajectory> {
    if model_index >= world.len() {
        return Err(Error::invalid(format!("model index {model_index} ≥ ensemble size {}", world.len())));
    }
    if h.t >= spec.horizon {
        return Err(Error::invalid(format!("history cut {} ≥ T = {}", h.t, spec.horizon)));
    }
    let mut state = policy.start();
    for obs in ds.history_obs(h) {
        policy.observe(&mut state, &obs);
    }
    let mut s = ds.trajectory(h.trajectory).states[h.t].clone();
    let mut out = ImaginedTrajectory {
        history: h,
        model_index,
        actions: Vec::new(),
        rewards: Vec::new(),
        next_states: Vec::new(),
        uncertainties: Vec::new(),
        step_models: Vec::new(),
        flags: Vec::new(),
        stop: StopReason::Timeout,
        nonfinite: false,
    };
    let mut t = h.t;
    loop {
        let a = policy.act(&state, rng);
        let q = world.query(model_index, &s, &a);
        let q = match q {
            Ok(q) if q.uncertainty.is_finite() => q,
            _ => {
                out.nonfinite = true;
                return Ok(finish_early(out));
            }
        };
        let trunc = q.uncertainty > spec.threshold.value;
        if trunc && !spec.keep_truncated_step {
            return Ok(finish_early(out));
        }
        let (r, s2) = WorldEnsemble::sample(&q.prediction, rng);
        if !r.is_finite() || s2.iter().any(|v| !v.is_finite()) {
            out.nonfinite = true;
            return Ok(finish_early(out));
        }
        let d = terminal_fn.is_terminal(&s, &a, &s2);
        let r = if spec.penalty > 0.0 {
            r - spec.penalty * q.uncertainty / spec.threshold.dataset_mean
        } else {
            r
        };
        let timeout = t + 1 >= spec.horizon;
        let flags = if d {
            StepFlags { terminal: true, ..Default::default() }
        } else if trunc {
            StepFlags { unc_trunc: true, ..Default::default() }
        } else if timeout {
            StepFlags { timeout: true, ..Default::default() }
        } else {
            StepFlags::default()
        };
        out.actions.push(a.clone());
        out.rewards.push(r);
        out.next_states.push(s2.clone());
        out.uncertainties.push(q.uncertainty);
        out.step_models.push(model_index);
        out.flags.push(flags);
        if flags.count() > 0 {
            out.stop = if d {
                StopReason::Terminal
            } else if trunc {
                StopReason::UncertaintyTruncation
            } else {
                StopReason::Timeout
            };
            return Ok(out);
        }
        policy.observe(&mut state, &history_obs(&s2, Some(&a), r, ds.action_dim()));
        s = s2;
        t += 1;
    }
}

/// Ends the rollout before the current step was stored.
fn finish_early(mut out: ImaginedTrajectory) -> ImaginedTrajectory {
    out.stop = StopReason::UncertaintyTruncation;
    if let Some(f) = out.flags.last_mut() {
        *f = StepFlags { unc_trunc: true, ..Default::default() };
    }
    out
}

/// Member for each of `k` rollouts: round-robin when `n` divides `k`,
/// otherwise uniform draws from `rng`.
pub fn assign_members(k: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if k % n == 0 {
        (0..k).map(|i| i % n).collect()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// One round of `spec.k` independent rollouts. Rollout `i` of round `round`
/// draws its history and noise from its own stream, so the result does not
/// depend on scheduling.
pub fn rollout_round<P: RolloutPolicy>(
    ds: &OfflineDataset,
    world: &WorldEnsemble,
    terminal_fn: &dyn TerminalFn,
    policy: &P,
    spec: &RolloutSpec,
    seed: u64,
    round: u64,
) -> Result<Vec<ImaginedTrajectory>> {
    if spec.k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let members = assign_members(spec.k, world.len(), &mut rng::stream(seed, Stream::Rollout, &[round, u64::MAX]));
    (0..spec.k)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Stream::Rollout, &[round, i as u64]);
            let h = ds.sample_history(&mut r);
            rollout(ds, h, members[i], world, terminal_fn, policy, spec, &mut r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub max: f64,
}

/// Imagined-length statistics with linearly interpolated percentiles.
pub fn horizon_stats(lengths: &[usize]) -> Result<HorizonStats> {
    if lengths.is_empty() {
        return Err(Error::invalid("horizon statistics of an empty round"));
    }
    let v: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    Ok(HorizonStats {
        median: stats::percentile_linear(&v, 0.5)?,
        q25: stats::percentile_linear(&v, 0.25)?,
        q75: stats::percentile_linear(&v, 0.75)?,
        max: v.iter().cloned().fold(f64::MIN, f64::max),
    })
}

pub fn round_horizons(round: &[ImaginedTrajectory]) -> Result<HorizonStats> {
    horizon_stats(&round.iter().map(|r| r.imagined_len()).collect::<Vec<_>>())
}

/// Policy drawing actions uniformly from `[−1, 1]^dim`.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub action_dim: usize,
}

impl RolloutPolicy for UniformPolicy {
    type State = ();
    fn start(&self) {}
    fn observe(&self, _: &mut (), _: &[f64]) {}
    fn act(&self, _: &(), rng: &mut Rng) -> Vec<f64> {
        (0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

/// Policy that always plays the same action.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl RolloutPolicy for ConstantPolicy {
    type State = ();
    fn start(&self) {}
    fn observe(&self, _: &mut (), _: &[f64]) {}
    fn act(&self, _: &(), _: &mut Rng) -> Vec<f64> {
        self.0.clone()
    }
}
