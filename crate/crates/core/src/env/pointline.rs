//! One-dimensional point mass used for end-to-end tests.
//!
//! `s' = s + 0.1·a + ε`, `ε ~ N(0, 0.01²)`, `r = −|s' − 1|`, `s_0 = 0`,
//! `a ∈ [−1, 1]`, no terminal states.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Environment, OfflineDataset, StepResult, Trajectory};
use crate::rng::Rng;
use crate::{Error, Result};

pub const STEP_SCALE: f64 = 0.1;
pub const NOISE_STD: f64 = 0.01;
pub const GOAL: f64 = 1.0;
pub const DEFAULT_HORIZON: usize = 50;
pub const LONG_HORIZON: usize = 1000;

#[derive(Debug, Clone)]
pub struct PointLine {
    horizon: usize,
    noise_std: f64,
    state: f64,
    t: usize,
    done: bool,
}

impl PointLine {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            noise_std: NOISE_STD,
            state: 0.0,
            t: 0,
            done: true,
        }
    }

    pub fn long() -> Self {
        Self::new(LONG_HORIZON)
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn mean_next(s: f64, a: f64) -> f64 {
        s + STEP_SCALE * a.clamp(-1.0, 1.0)
    }

    pub fn reward(next: f64) -> f64 {
        -(next - GOAL).abs()
    }

    /// Greedy controller that moves straight to the goal.
    pub fn optimal_action(s: f64) -> f64 {
        ((GOAL - s) / STEP_SCALE).clamp(-1.0, 1.0)
    }
}

impl Default for PointLine {
    fn default() -> Self {
        Self::new(DEFAULT_HORIZON)
    }
}

impl Environment for PointLine {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<f64> {
        self.state = 0.0;
        self.t = 0;
        self.done = false;
        vec![self.state]
    }

    fn step(&mut self, action: &[f64], rng: &mut Rng) -> Result<StepResult> {
        if self.done {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let eps = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std).unwrap().sample(rng)
        } else {
            0.0
        };
        self.state = Self::mean_next(self.state, action[0]) + eps;
        self.t += 1;
        let truncated = self.t >= self.horizon;
        self.done = truncated;
        Ok(StepResult {
            next_state: vec![self.state],
            reward: Self::reward(self.state),
            terminal: false,
            truncated,
        })
    }
}

/// Behavior policies used to generate offline PointLine data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorPolicy {
    /// Uniform actions on [−1, 1].
    Random,
    /// `clip(0.5·a* + N(0, σ²))`.
    NoisyHalfOptimal { noise_std: f64 },
    /// `clip(a* + N(0, σ²))`.
    NearOptimal { noise_std: f64 },
}

impl BehaviorPolicy {
    pub fn act(&self, s: f64, rng: &mut Rng) -> f64 {
        let gauss = |sd: f64, rng: &mut Rng| Normal::new(0.0, sd).unwrap().sample(rng);
        match *self {
            BehaviorPolicy::Random => Uniform::new_inclusive(-1.0, 1.0).unwrap().sample(rng),
            BehaviorPolicy::NoisyHalfOptimal { noise_std } => {
                (0.5 * PointLine::optimal_action(s) + gauss(noise_std, rng)).clamp(-1.0, 1.0)
            }
            BehaviorPolicy::NearOptimal { noise_std } => {
                (PointLine::optimal_action(s) + gauss(noise_std, rng)).clamp(-1.0, 1.0)
            }
        }
    }

    pub fn medium() -> Self {
        BehaviorPolicy::NoisyHalfOptimal { noise_std: 0.3 }
    }
}

/// Rolls `n` full episodes of `behavior` in `env`.
pub fn generate_dataset(
    env: &PointLine,
    behavior: BehaviorPolicy,
    n: usize,
    gamma: f64,
    rng: &mut Rng,
) -> Result<OfflineDataset> {
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let mut e = env.clone();
        let mut s = e.reset(rng);
        let mut tr = Trajectory {
            states: vec![s.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
        };
        loop {
            let a = behavior.act(s[0], rng);
            let step = e.step(&[a], rng)?;
            tr.actions.push(vec![a]);
            tr.rewards.push(step.reward);
            tr.terminals.push(step.terminal);
            tr.states.push(step.next_state.clone());
            s = step.next_state;
            if step.truncated || step.terminal {
                break;
            }
        }
        trajectories.push(tr);
    }
    OfflineDataset::new(1, 1, env.horizon(), gamma, trajectories)
}

/// Uniform-random policy return, averaged over `episodes`.
pub fn random_policy_return(env: &PointLine, episodes: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut e = env.clone();
        e.reset(rng);
        loop {
            let a = rng.random_range(-1.0..=1.0);
            let st = e.step(&[a], rng).expect("episode running");
            total += st.reward;
            if st.truncated {
                break;
            }
        }
    }
    total / episodes as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn step_after_end_is_error() {
        let mut env = PointLine::new(2);
        let mut rng = stream(0, Stream::Eval, &[]);
        env.reset(&mut rng);
        assert!(!env.step(&[1.0], &mut rng).unwrap().truncated);
        let last = env.step(&[1.0], &mut rng).unwrap();
        assert!(last.truncated && !last.terminal);
        assert!(env.step(&[1.0], &mut rng).is_err());
    }

    #[test]
    fn noiseless_dynamics_match_closed_form() {
        let mut env = PointLine::new(5).with_noise(0.0);
        let mut rng = stream(0, Stream::Eval, &[]);
        env.reset(&mut rng);
        let st = env.step(&[2.0], &mut rng).unwrap();
        assert_eq!(st.next_state, vec![0.1]);
        assert!((st.reward + 0.9).abs() < 1e-12);
    }

    #[test]
    fn generated_dataset_shape() {
        let mut rng = stream(1, Stream::Data, &[]);
        let ds = generate_dataset(&PointLine::default(), BehaviorPolicy::medium(), 3, 0.99, &mut rng).unwrap();
        assert_eq!(ds.trajectories().len(), 3);
        assert_eq!(ds.num_transitions(), 150);
    }
}
