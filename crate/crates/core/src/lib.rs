//! Bayesian offline model-based reinforcement learning.
//!
//! An ensemble of Gaussian world models stands in for the posterior over
//! environments. A recurrent actor-critic is trained on long imagined
//! rollouts that stop only when ensemble disagreement leaves the range
//! observed on the offline dataset, when the episode times out, or when the
//! known terminal function fires.
//!
//! Module map:
//!
//! * [`env`] trajectories, histories, datasets and the built-in toy MDPs
//! * [`world`] Gaussian MLP ensembles, disagreement and quantile thresholds
//! * [`rollout`] truncated imagined rollouts and the replay tape
//! * [`agent`] LRU encoders, SAC/REDQ and dueling-DQN agents
//! * [`trainer`] the full offline training loop with checkpoints and metrics
//! * [`bandit`] the skewed two-armed bandit experiment
//! * [`theory`] concentrability coefficients and the Bayes-vs-robust gap
//! * [`diagnostics`] compounding-error study and the bootstrapped backup bound

pub mod agent;
pub mod bandit;
pub mod ckpt;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod nn;
pub mod rng;
pub mod rollout;
pub mod stats;
pub mod theory;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
