//! Skewed two-armed bandit: an arm-0-only dataset, a Gaussian reward
//! ensemble over one-hot actions, a recurrent Q-agent trained purely on
//! imagined episodes, and test-time evaluation on unseen arm-1 means.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, one_hot, AgentConfig, DqnAgent};
use crate::env::{history_obs, Environment, OfflineDataset, StepResult, Trajectory};
use crate::rng::{stream, Rng, Stream};
use crate::rollout::{ReplayTape, RolloutPolicy, Sequence};
use crate::stats::{mean, pop_std};
use crate::world::{Criterion, GaussianEnsemble, Improvement, ModelConfig, TrainConfig};
use crate::{Error, Result};

pub const P0: f64 = 0.5;
pub const TEST_P1: [f64; 5] = [0.01, 0.3, 0.55, 0.7, 0.99];
pub const HORIZON: usize = 100;
pub const N_TRAJECTORIES: usize = 10;
/// Penalty coefficient of the conservative agent.
pub const LAMBDA_HEAVY: f64 = 10.0;
/// Multipliers of the reported λ sweep.
pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.5, 1.0, 5.0, 10.0];
pub const N_ARMS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSpec {
    pub p0: f64,
    pub p1_test: Vec<f64>,
    pub horizon: usize,
    pub n_trajectories: usize,
}

impl Default for BanditSpec {
    fn default() -> Self {
        Self {
            p0: P0,
            p1_test: TEST_P1.to_vec(),
            horizon: HORIZON,
            n_trajectories: N_TRAJECTORIES,
        }
    }
}

/// Observation width of the bandit history: zero state, one-hot previous
/// action, previous reward.
pub fn bandit_obs_dim() -> usize {
    1 + N_ARMS + 1
}

/// Arm-0-only dataset with Bernoulli(p0) rewards and a constant zero state.
pub fn make_bandit_dataset(spec: &BanditSpec, gamma: f64, seed: u64) -> Result<OfflineDataset> {
    let mut rng = stream(seed, Stream::Data, &[]);
    let trajectories = (0..spec.n_trajectories)
        .map(|_| Trajectory {
            states: vec![vec![0.0]; spec.horizon + 1],
            actions: vec![one_hot(0, N_ARMS); spec.horizon],
            rewards: (0..spec.horizon)
                .map(|_| if rng.random::<f64>() < spec.p0 { 1.0 } else { 0.0 })
                .collect(),
            terminals: vec![false; spec.horizon],
        })
        .collect();
    OfflineDataset::new(1, N_ARMS, spec.horizon, gamma, trajectories)
}

/// True Bernoulli bandit for test-time evaluation.
#[derive(Debug, Clone)]
pub struct TwoArmedBandit {
    pub p: [f64; 2],
    pub horizon: usize,
    t: usize,
    done: bool,
}

impl TwoArmedBandit {
    pub fn new(p0: f64, p1: f64, horizon: usize) -> Self {
        Self {
            p: [p0, p1],
            horizon,
            t: 0,
            done: true,
        }
    }
}

impl Environment for TwoArmedBandit {
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        N_ARMS
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&mut self, _: &mut Rng) -> Vec<f64> {
        self.t = 0;
        self.done = false;
        vec![0.0]
    }
    fn step(&mut self, action: &[f64], rng: &mut Rng) -> Result<StepResult> {
        if self.done {
            return Err(Error::invalid("step called on a finished bandit episode"));
        }
        let arm = argmax(action);
        let reward = if rng.random::<f64>() < self.p[arm] { 1.0 } else { 0.0 };
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            next_state: vec![0.0],
            reward,
            terminal: false,
            truncated: self.done,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardEnsembleConfig {
    pub pool_size: usize,
    pub members: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RewardEnsembleConfig {
    fn default() -> Self {
        Self {
            pool_size: 40,
            members: 20,
            model: ModelConfig {
                hidden_layers: 2,
                width: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                criterion: Criterion::Nll,
                improvement: Improvement::Absolute(0.001),
                ..TrainConfig::default()
            },
        }
    }
}

/// Gaussian reward models over one-hot actions.
#[derive(Debug, Clone)]
pub struct RewardEnsemble {
    pub ensemble: GaussianEnsemble,
    /// `means[m][a]`, `stds[m][a]` in reward units.
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<[f64; 2]>,
}

impl RewardEnsemble {
    pub fn fit(ds: &OfflineDataset, cfg: &RewardEnsembleConfig, seed: u64) -> Result<Self> {
        let n = ds.num_transitions();
        let mut x = Array2::zeros((n, N_ARMS));
        let mut y = Array2::zeros((n, 1));
        for (i, tr) in ds.transitions().enumerate() {
            for (j, v) in tr.action.iter().enumerate() {
                x[[i, j]] = *v;
            }
            y[[i, 0]] = tr.reward;
        }
        let ensemble = GaussianEnsemble::fit(&x, &y, cfg.pool_size, cfg.members, &cfg.model, &cfg.train, seed)?;
        Ok(Self::from_ensemble(ensemble))
    }

    pub fn from_ensemble(ensemble: GaussianEnsemble) -> Self {
        let arms = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (means, stds) = (0..ensemble.len())
            .map(|m| {
                let (mu, sd) = ensemble.predict(m, &arms);
                ([mu[[0, 0]], mu[[1, 0]]], [sd[[0, 0]], sd[[1, 0]]])
            })
            .unzip();
        Self { ensemble, means, stds }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Population std of member means for `arm`, in reward units.
    pub fn uncertainty(&self, arm: usize) -> f64 {
        let v: Vec<f64> = self.means.iter().map(|m| m[arm]).collect();
        pop_std(&v)
    }

    pub fn posterior(&self) -> PosteriorReport {
        let u0 = self.uncertainty(0);
        let u1 = self.uncertainty(1);
        PosteriorReport {
            arm0_means: self.means.iter().map(|m| m[0]).collect(),
            arm1_means: self.means.iter().map(|m| m[1]).collect(),
            u0,
            u1,
            ratio: if u0 > 0.0 { u1 / u0 } else { f64::NAN },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub arm0_means: Vec<f64>,
    pub arm1_means: Vec<f64>,
    pub u0: f64,
    pub u1: f64,
    /// `U(arm 1) / U(arm 0)`; NaN when `U(arm 0) = 0`.
    pub ratio: f64,
}

impl PosteriorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("member,arm0_mean,arm1_mean\n");
        for (i, (a, b)) in self.arm0_means.iter().zip(&self.arm1_means).enumerate() {
            s.push_str(&format!("{i},{a},{b}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditAgentConfig {
    pub agent: AgentConfig,
    pub steps: u64,
    pub episodes_per_round: usize,
    pub updates_per_round: usize,
    pub tape_episodes: usize,
}

impl Default for BanditAgentConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig {
                head_lr: 1e-3,
                encoder_lr: 1e-4,
                gamma: 0.95,
                grad_clip: 1.0,
                batch_len: 400,
                total_steps: 20_000,
                ..AgentConfig::default()
            },
            steps: 20_000,
            episodes_per_round: 4,
            updates_per_round: 4,
            tape_episodes: 400,
        }
    }
}

/// One imagined episode under member `m`. Stored rewards are
/// `clip(μ_m(a) + σ_m(a) ξ, 0, 1) − λ U(a)`; the history the agent observes
/// carries the unpenalized clipped reward.
pub fn imagined_episode<P: RolloutPolicy>(
    ens: &RewardEnsemble,
    m: usize,
    lambda: f64,
    policy: &P,
    horizon: usize,
    rng: &mut Rng,
) -> Sequence {
    let u = [ens.uncertainty(0), ens.uncertainty(1)];
    let mut seq = Sequence::new(bandit_obs_dim(), N_ARMS);
    let mut state = policy.start();
    let first = history_obs(&[0.0], None, 0.0, N_ARMS);
    policy.observe(&mut state, &first);
    seq.push_obs(&first);
    for _ in 0..horizon {
        let a = policy.act(&state, rng);
        let arm = argmax(&a);
        let xi: f64 = StandardNormal.sample(rng);
        let r = (ens.means[m][arm] + ens.stds[m][arm] * xi).clamp(0.0, 1.0);
        seq.set_transition(&a, r - lambda * u[arm], false, false);
        let obs = history_obs(&[0.0], Some(&a), r, N_ARMS);
        policy.observe(&mut state, &obs);
        seq.push_obs(&obs);
    }
    seq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTrainLog {
    pub steps: u64,
    pub episodes: u64,
    pub final_loss: f64,
    pub mean_q: f64,
}

/// Trains a recurrent Q-agent on imagined episodes only.
pub fn train_bandit_agent(
    ens: &RewardEnsemble,
    lambda: f64,
    cfg: &BanditAgentConfig,
    horizon: usize,
    seed: u64,
) -> Result<(DqnAgent, BanditTrainLog)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid("λ must be finite and non-negative"));
    }
    if ens.is_empty() {
        return Err(Error::invalid("empty reward ensemble"));
    }
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.total_steps = cfg.steps;
    let mut agent = DqnAgent::new(bandit_obs_dim(), N_ARMS, agent_cfg, &mut stream(seed, Stream::Init, &[]))?;
    let mut tape = ReplayTape::new(cfg.tape_episodes * (horizon + 1), bandit_obs_dim(), N_ARMS);
    let mut episodes = 0u64;
    let mut round = 0u64;
    let mut last = Default::default();
    let mut loss_window = Vec::new();
    while agent.step < cfg.steps {
        let policy = agent.policy(agent.epsilon());
        let seqs: Vec<Sequence> = (0..cfg.episodes_per_round)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, Stream::Rollout, &[round, i as u64]);
                let m = rng.random_range(0..ens.len());
                imagined_episode(ens, m, lambda, &policy, horizon, &mut rng)
            })
            .collect();
        for s in seqs {
            tape.append(s)?;
            episodes += 1;
        }
        for _ in 0..cfg.updates_per_round {
            if agent.step >= cfg.steps {
                break;
            }
            let mut rng = stream(seed, Stream::Update, &[agent.step]);
            last = agent.update(&tape, &mut rng)?;
            if !last.skipped {
                loss_window.push(last.critic_loss);
                if loss_window.len() > 100 {
                    loss_window.remove(0);
                }
            }
        }
        round += 1;
    }
    Ok((
        agent,
        BanditTrainLog {
            steps: cfg.steps,
            episodes,
            final_loss: mean(&loss_window),
            mean_q: last.mean_q,
        },
    ))
}

/// Test-time statistics for one arm-1 mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEvalRow {
    pub p1: f64,
    /// Mean over episodes of `(1/T) Σ r`.
    pub mean_return: f64,
    pub std: f64,
    /// Fraction of all steps that pulled arm 1.
    pub arm1_rate: f64,
    /// Mean number of arm-1 pulls in the first 20 steps.
    pub early_arm1_pulls: f64,
    /// Fraction of arm-1 pulls over the last 50 steps.
    pub late_arm1_rate: f64,
}

/// Runs `episodes` true-bandit episodes per `p1`, feeding the policy the
/// observed history. Each `p1` owns its RNG stream.
pub fn evaluate_bandit<P: RolloutPolicy>(
    policy: &P,
    p1_values: &[f64],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<BanditEvalRow>> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    p1_values
        .par_iter()
        .enumerate()
        .map(|(i, &p1)| {
            let mut rng = stream(seed, Stream::Eval, &[i as u64]);
            let mut env = TwoArmedBandit::new(P0, p1, horizon);
            let mut returns = Vec::with_capacity(episodes);
            let (mut pulls, mut early, mut late) = (0usize, 0usize, 0usize);
            for _ in 0..episodes {
                let mut state = policy.start();
                let s0 = env.reset(&mut rng);
                policy.observe(&mut state, &history_obs(&s0, None, 0.0, N_ARMS));
                let mut total = 0.0;
                for t in 0..horizon {
                    let a = policy.act(&state, &mut rng);
                    let step = env.step(&a, &mut rng)?;
                    if argmax(&a) == 1 {
                        pulls += 1;
                        if t < 20 {
                            early += 1;
                        }
                        if t + 50 >= horizon {
                            late += 1;
                        }
                    }
                    total += step.reward;
                    policy.observe(&mut state, &history_obs(&step.next_state, Some(&a), step.reward, N_ARMS));
                }
                returns.push(total / horizon as f64);
            }
            let n = episodes as f64;
            Ok(BanditEvalRow {
                p1,
                mean_return: mean(&returns),
                std: pop_std(&returns),
                arm1_rate: pulls as f64 / (n * horizon as f64),
                early_arm1_pulls: early as f64 / n,
                late_arm1_rate: late as f64 / (n * horizon.min(50) as f64),
            })
        })
        .collect()
}

pub fn fig3_csv(rows: &[BanditEvalRow], lambda: f64) -> String {
    let mut s = String::from("p1,mean_return,std,lambda\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.p1, r.mean_return, r.std, lambda));
    }
    s
}

/// Full pipeline for one seed and one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditRun {
    pub lambda: f64,
    pub posterior: PosteriorReport,
    pub train: BanditTrainLog,
    pub rows: Vec<BanditEvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditRunConfig {
    pub spec: BanditSpec,
    pub ensemble: RewardEnsembleConfig,
    pub agent: BanditAgentConfig,
    pub eval_episodes: usize,
}

impl Default for BanditRunConfig {
    fn default() -> Self {
        Self {
            spec: BanditSpec::default(),
            ensemble: RewardEnsembleConfig::default(),
            agent: BanditAgentConfig::default(),
            eval_episodes: 20,
        }
    }
}

/// Dataset, ensemble, then one agent per λ, all keyed by `seed`.
pub fn run_bandit(cfg: &BanditRunConfig, lambdas: &[f64], seed: u64) -> Result<(RewardEnsemble, Vec<BanditRun>)> {
    let ds = make_bandit_dataset(&cfg.spec, cfg.agent.agent.gamma, seed)?;
    let ens = RewardEnsemble::fit(&ds, &cfg.ensemble, seed)?;
    let posterior = ens.posterior();
    let mut runs = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (agent, train) = train_bandit_agent(&ens, lambda, &cfg.agent, cfg.spec.horizon, seed)?;
        let rows = evaluate_bandit(&agent.policy(0.0), &cfg.spec.p1_test, cfg.eval_episodes, cfg.spec.horizon, seed)?;
        runs.push(BanditRun {
            lambda,
            posterior: posterior.clone(),
            train,
            rows,
        });
    }
    Ok((ens, runs))
}
