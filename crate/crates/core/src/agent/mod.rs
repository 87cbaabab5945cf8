//! History-conditioned agents trained on tape batches.
//!
//! Actor and critic each own an [`LruEncoder`](crate::nn::LruEncoder). The
//! continuous agent ([`SacAgent`]) combines a tanh-squashed Gaussian actor
//! with a 10-head critic whose bootstrap target takes the minimum over two
//! randomly chosen target heads. The discrete agent ([`DqnAgent`]) uses a
//! dueling value head with ε-greedy behavior.

mod actor;
mod critic;
mod dqn;
mod eval;
mod sac;

pub use actor::{squash_backward, squash_sample, Actor, ActMode, Squashed};
pub use critic::{dueling_backward, dueling_combine, CriticEnsemble, DuelingCritic};
pub use dqn::{argmax, dqn_backprop, dqn_objective, one_hot, DqnAgent, DqnPolicy, DqnTape};
pub use eval::{evaluate, EvalReport};
pub use sac::{actor_backprop, actor_objective, critic_backprop, critic_objective, transition_rows, ActorPolicy, ActorTape, CriticTape, SacAgent};

use serde::{Deserialize, Serialize};

use crate::nn::{LruEncoder, DEFAULT_SLOPE};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Width after the input projection and inside the LRU stack.
    pub width: usize,
    /// Complex state size of each LRU layer.
    pub hidden: usize,
    pub layers: usize,
    pub out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            hidden: 32,
            layers: 2,
            out: 32,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self, obs_dim: usize, slope: f64, rng: &mut Rng) -> LruEncoder {
        LruEncoder::new(obs_dim, self.width, self.hidden, self.layers, self.out, slope, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum EntropyMode {
    /// Tuned toward target entropy; `None` means `−dim(A)`.
    Auto(Option<f64>),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub encoder: EncoderConfig,
    pub head_widths: Vec<usize>,
    pub head_layer_norm: bool,
    pub slope: f64,
    pub head_lr: f64,
    pub encoder_lr: f64,
    pub alpha_lr: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub entropy: EntropyMode,
    pub initial_alpha: f64,
    pub n_critics: usize,
    pub critic_subsample: usize,
    pub grad_clip: f64,
    /// Target network averaging rate ρ.
    pub tau: f64,
    /// Minimum entries per training batch.
    pub batch_len: usize,
    /// Cosine-decay the actor learning rates to zero over `total_steps`.
    pub actor_cosine_decay: bool,
    pub total_steps: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_widths: vec![32, 32],
            head_layer_norm: true,
            slope: DEFAULT_SLOPE,
            head_lr: 1e-4,
            encoder_lr: 3e-6,
            alpha_lr: 1e-4,
            kappa: 0.5,
            gamma: 0.99,
            entropy: EntropyMode::Auto(None),
            initial_alpha: 1.0,
            n_critics: 10,
            critic_subsample: 2,
            grad_clip: 1000.0,
            tau: 0.005,
            batch_len: 128,
            actor_cosine_decay: true,
            total_steps: 100_000,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_fraction: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::invalid(format!("κ = {} outside (0, 1)", self.kappa)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("γ = {} outside (0, 1)", self.gamma)));
        }
        if self.encoder_lr > self.head_lr {
            return Err(Error::invalid("encoder learning rate exceeds the head learning rate"));
        }
        if self.critic_subsample == 0 || self.critic_subsample > self.n_critics {
            return Err(Error::invalid("critic subsample size must lie in 1..=n_critics"));
        }
        if self.batch_len == 0 || self.head_lr <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::invalid("batch length, learning rate and clip must be positive"));
        }
        Ok(())
    }

    /// Cosine schedule multiplier at `step`.
    pub fn actor_lr_scale(&self, step: u64) -> f64 {
        if !self.actor_cosine_decay || self.total_steps == 0 {
            return 1.0;
        }
        let p = (step as f64 / self.total_steps as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    /// Linear ε schedule from `eps_start` to `eps_end` over the first
    /// `eps_fraction` of `total_steps`.
    pub fn epsilon(&self, step: u64) -> f64 {
        let span = self.eps_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return self.eps_end;
        }
        let p = (step as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * p
    }
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
    pub entropy: f64,
    pub skipped: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let c = AgentConfig {
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(c.actor_lr_scale(0), 1.0);
        assert!(c.actor_lr_scale(1000).abs() < 1e-12);
        assert!((c.actor_lr_scale(500) - 0.5).abs() < 1e-12);
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(50) - 0.55).abs() < 1e-12);
        assert!((c.epsilon(100) - 0.1).abs() < 1e-12);
        assert!((c.epsilon(900) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kappa_bounds() {
        let mut c = AgentConfig::default();
        c.kappa = 1.0;
        assert!(c.validate().is_err());
        c.kappa = 0.5;
        assert!(c.validate().is_ok());
    }
}
