//! Trajectories, histories, offline datasets and the environment interface.

mod io;
pub mod pointline;

pub use io::{load_dataset, save_dataset, save_dataset_binary, save_dataset_jsonl, DatasetFormat};
pub use pointline::{BehaviorPolicy, PointLine};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;

/// A single step; `terminal` and `truncated` are mutually exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
}

/// Columnar trajectory: `states` has one more entry than the other columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            state: self.states[t].clone(),
            action: self.actions[t].clone(),
            reward: self.rewards[t],
            next_state: self.states[t + 1].clone(),
            terminal: self.terminals[t],
            truncated: false,
        }
    }

    /// Checks the structural invariants; `index` is used in error messages.
    pub fn validate(&self, index: usize, state_dim: usize, action_dim: usize) -> Result<()> {
        let err = |step: usize, msg: String| Error::Trajectory {
            trajectory: index,
            step,
            msg,
        };
        let l = self.actions.len();
        if l == 0 {
            return Err(err(0, "trajectory has no steps".into()));
        }
        if self.states.len() != l + 1 || self.rewards.len() != l || self.terminals.len() != l {
            return Err(err(
                0,
                format!(
                    "column lengths states={} actions={} rewards={} terminals={}",
                    self.states.len(),
                    l,
                    self.rewards.len(),
                    self.terminals.len()
                ),
            ));
        }
        for (t, s) in self.states.iter().enumerate() {
            if s.len() != state_dim {
                return Err(err(t, format!("state has dimension {}, expected {state_dim}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(err(t, "non-finite state".into()));
            }
        }
        for (t, a) in self.actions.iter().enumerate() {
            if a.len() != action_dim {
                return Err(err(t, format!("action has dimension {}, expected {action_dim}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) || !self.rewards[t].is_finite() {
                return Err(err(t, "non-finite action or reward".into()));
            }
        }
        if let Some(t) = self.terminals[..l - 1].iter().position(|&d| d) {
            return Err(err(t, format!("terminal before the final step {}", l - 1)));
        }
        Ok(())
    }
}

/// Cut `t` of trajectory `trajectory`: `h_t = (s_{0:t}, a_{0:t−1}, r_{1:t})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct History {
    pub trajectory: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(rename = "T")]
    pub max_len: usize,
    pub gamma: f64,
    pub n_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    max_len: usize,
    gamma: f64,
    trajectories: Vec<Trajectory>,
    /// `cum[i]` = number of valid cuts in trajectories `0..i`.
    cum: Vec<usize>,
}

impl OfflineDataset {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        max_len: usize,
        gamma: f64,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Empty);
        }
        if state_dim == 0 && action_dim == 0 {
            return Err(Error::invalid("state and action dimensions are both zero"));
        }
        if max_len == 0 {
            return Err(Error::invalid("max episode length must be positive"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} outside (0, 1)")));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            tr.validate(i, state_dim, action_dim)?;
            if tr.len() > max_len {
                return Err(Error::Trajectory {
                    trajectory: i,
                    step: max_len,
                    msg: format!("length {} exceeds T = {max_len}", tr.len()),
                });
            }
        }
        let mut cum = Vec::with_capacity(trajectories.len() + 1);
        cum.push(0);
        for tr in &trajectories {
            cum.push(cum.last().unwrap() + tr.len());
        }
        Ok(Self {
            state_dim,
            action_dim,
            max_len,
            gamma,
            trajectories,
            cum,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            max_len: self.max_len,
            gamma: self.gamma,
            n_trajectories: self.trajectories.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} outside (0, 1)")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn num_transitions(&self) -> usize {
        *self.cum.last().unwrap()
    }

    /// All transitions in storage order.
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.trajectories
            .iter()
            .flat_map(|tr| (0..tr.len()).map(move |t| tr.transition(t)))
    }

    /// Draws `(trajectory, t)` uniformly over every cut with `0 ≤ t < L`.
    pub fn sample_history(&self, rng: &mut Rng) -> History {
        self.history_at(rng.random_range(0..self.num_transitions()))
    }

    /// Maps a flat transition index to its history cut.
    pub fn history_at(&self, flat: usize) -> History {
        let i = self.cum.partition_point(|&c| c <= flat) - 1;
        History {
            trajectory: i,
            t: flat - self.cum[i],
        }
    }

    /// Observation vectors `(s_j, a_{j−1}, r_j)` for `j = 0..=h.t`; the first
    /// carries zero action and reward.
    pub fn history_obs(&self, h: History) -> Vec<Vec<f64>> {
        let tr = &self.trajectories[h.trajectory];
        (0..=h.t)
            .map(|j| {
                if j == 0 {
                    history_obs(&tr.states[0], None, 0.0, self.action_dim)
                } else {
                    history_obs(&tr.states[j], Some(&tr.actions[j - 1]), tr.rewards[j - 1], self.action_dim)
                }
            })
            .collect()
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(self.state_dim, self.action_dim)
    }

    pub fn reward_range(&self) -> (f64, f64) {
        self.trajectories
            .iter()
            .flat_map(|t| t.rewards.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }
}

pub fn obs_dim(state_dim: usize, action_dim: usize) -> usize {
    state_dim + action_dim + 1
}

/// Encoder input for one history entry.
pub fn history_obs(state: &[f64], prev_action: Option<&[f64]>, reward: f64, action_dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + action_dim + 1);
    v.extend_from_slice(state);
    match prev_action {
        Some(a) => v.extend_from_slice(a),
        None => v.extend(std::iter::repeat_n(0.0, action_dim)),
    }
    v.push(reward);
    v
}

/// `(score − random) / (expert − random) × 100`.
pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> Result<f64> {
    let span = expert_score - random_score;
    if span == 0.0 {
        return Err(Error::invalid("expert score equals random score"));
    }
    Ok((score - random_score) / span * 100.0)
}

/// `Σ_t γ^t r_{t+1}`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

/// Online environment used only for test-time evaluation.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    /// Errors when called after the episode ended.
    fn step(&mut self, action: &[f64], rng: &mut Rng) -> Result<StepResult>;
}

/// Known terminal function `f_term(s, a, s')`.
pub trait TerminalFn: Sync {
    fn is_terminal(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NeverTerminal;

impl TerminalFn for NeverTerminal {
    fn is_terminal(&self, _: &[f64], _: &[f64], _: &[f64]) -> bool {
        false
    }
}

impl<F: Fn(&[f64], &[f64], &[f64]) -> bool + Sync> TerminalFn for F {
    fn is_terminal(&self, s: &[f64], a: &[f64], s2: &[f64]) -> bool {
        self(s, a, s2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(l: usize, terminal_at: Option<usize>) -> Trajectory {
        Trajectory {
            states: (0..=l).map(|i| vec![i as f64]).collect(),
            actions: vec![vec![0.0]; l],
            rewards: vec![1.0; l],
            terminals: (0..l).map(|i| Some(i) == terminal_at).collect(),
        }
    }

    #[test]
    fn mid_trajectory_terminal_is_rejected_with_location() {
        let err = OfflineDataset::new(1, 1, 10, 0.99, vec![traj(5, None), traj(5, Some(3))]).unwrap_err();
        match err {
            Error::Trajectory { trajectory, step, .. } => assert_eq!((trajectory, step), (1, 3)),
            e => panic!("unexpected {e}"),
        }
        assert!(OfflineDataset::new(1, 1, 10, 0.99, vec![traj(5, Some(4))]).is_ok());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(OfflineDataset::new(1, 1, 10, 0.99, vec![]), Err(Error::Empty)));
    }

    #[test]
    fn length_one_trajectory_always_yields_h0() {
        let ds = OfflineDataset::new(1, 1, 10, 0.99, vec![traj(1, None)]).unwrap();
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Data, &[]);
        for _ in 0..100 {
            assert_eq!(ds.sample_history(&mut rng), History { trajectory: 0, t: 0 });
        }
    }

    #[test]
    fn history_index_map() {
        let ds = OfflineDataset::new(1, 1, 10, 0.99, vec![traj(2, None), traj(3, None)]).unwrap();
        let cuts: Vec<_> = (0..5).map(|i| ds.history_at(i)).map(|h| (h.trajectory, h.t)).collect();
        assert_eq!(cuts, vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]);
        let obs = ds.history_obs(History { trajectory: 1, t: 2 });
        assert_eq!(obs, vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 1.0], vec![2.0, 0.0, 1.0]]);
    }

    #[test]
    fn scores_and_returns() {
        assert_eq!(normalized_score(7.0, 3.0, 7.0).unwrap(), 100.0);
        assert_eq!(normalized_score(3.0, 3.0, 7.0).unwrap(), 0.0);
        assert!((normalized_score(3.0 + 4.0 * 1.2, 3.0, 7.0).unwrap() - 120.0).abs() < 1e-9);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(discounted_return(&[5.0], 0.3), 5.0);
    }
}
