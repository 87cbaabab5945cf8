use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sac::{scatter, select, transition_rows};
use super::{dueling_backward, dueling_combine, AgentConfig, DuelingCritic, UpdateMetrics};
use crate::nn::{clip_grad_norm, AdamW, EncoderState, LruEncoderCache, MlpCache, Params};
use crate::rng::Rng;
use crate::rollout::{Batch, ReplayTape, RolloutPolicy};
use crate::{ckpt, Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Dueling Q-learning over history features.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub cfg: AgentConfig,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub online: DuelingCritic,
    pub target: DuelingCritic,
    opt_head: AdamW,
    opt_enc: AdamW,
    pub step: u64,
    pub skipped: u64,
}

pub struct DqnTape {
    enc: LruEncoderCache,
    head: MlpCache,
    g_q: Array2<f64>,
    idx: Vec<usize>,
    pub mean_q: f64,
}

/// `Σ_j w_j (Q(h_j, a_j) − y_j)²` over transition rows; the action of each
/// row is the argmax of its stored one-hot vector.
pub fn dqn_objective(critic: &DuelingCritic, batch: &Batch, targets: &[f64]) -> (f64, DqnTape) {
    let (idx, _) = transition_rows(batch);
    let (z, enc) = critic.encoder.forward(&batch.obs, &batch.resets);
    let (raw, head) = critic.head.forward(&select(&z, &idx));
    let q = dueling_combine(&raw);
    let mut g_q = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    let mut mean_q = 0.0;
    for (r, &j) in idx.iter().enumerate() {
        let a = argmax(batch.actions.row(j).as_slice().unwrap());
        let e = q[[r, a]] - targets[r];
        loss += batch.weights[j] * e * e;
        g_q[[r, a]] = 2.0 * batch.weights[j] * e;
        mean_q += batch.weights[j] * q[[r, a]];
    }
    (
        loss,
        DqnTape {
            enc,
            head,
            g_q,
            idx,
            mean_q,
        },
    )
}

pub fn dqn_backprop(critic: &mut DuelingCritic, tape: &DqnTape, batch: &Batch) {
    let g_raw = dueling_backward(&tape.g_q);
    let g_z = critic.head.backward(&tape.head, &g_raw, true);
    critic
        .encoder
        .backward(&tape.enc, &batch.resets, &scatter(&g_z, &tape.idx, batch.len()));
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DqnHeader {
    cfg: AgentConfig,
    obs_dim: usize,
    n_actions: usize,
    step: u64,
    skipped: u64,
    optimizers: Vec<AdamW>,
}

const MAGIC: &[u8; 4] = b"NBDQ";
const VERSION: u32 = 1;

impl DqnAgent {
    pub fn new(obs_dim: usize, n_actions: usize, cfg: AgentConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if n_actions < 2 {
            return Err(Error::invalid("a discrete agent needs at least two actions"));
        }
        let online = DuelingCritic::new(obs_dim, n_actions, &cfg, rng);
        Ok(Self {
            obs_dim,
            n_actions,
            target: online.clone(),
            online,
            opt_head: AdamW::new(0.0),
            opt_enc: AdamW::new(0.0),
            step: 0,
            skipped: 0,
            cfg,
        })
    }

    /// `r + γ(1 − d) max_a Q̄(h', a)` for the transition rows.
    pub fn td_targets(&self, batch: &Batch) -> Vec<f64> {
        let (idx, next) = transition_rows(batch);
        let (zt, _) = self.target.encoder.forward(&batch.obs, &batch.resets);
        let q = self.target.q_from_features(&select(&zt, &next));
        idx.iter()
            .enumerate()
            .map(|(r, &j)| {
                let best = q.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let cont = if batch.terminals[j] { 0.0 } else { 1.0 };
                batch.rewards[j] + self.cfg.gamma * cont * best
            })
            .collect()
    }

    pub fn update(&mut self, tape: &ReplayTape, rng: &mut Rng) -> Result<UpdateMetrics> {
        let batch = tape.sample_batch(self.cfg.batch_len, self.cfg.kappa, rng)?;
        Ok(self.update_on_batch(&batch))
    }

    pub fn update_on_batch(&mut self, batch: &Batch) -> UpdateMetrics {
        let (idx, _) = transition_rows(batch);
        let mut m = UpdateMetrics::default();
        if idx.is_empty() {
            m.skipped = true;
            return m;
        }
        let targets = self.td_targets(batch);
        self.online.zero_grad();
        let (loss, tape) = dqn_objective(&self.online, batch, &targets);
        dqn_backprop(&mut self.online, &tape, batch);
        self.step += 1;
        if !loss.is_finite() || !self.online.grads_finite() {
            log::warn!("non-finite Q gradient at step {}; update skipped", self.step);
            self.online.zero_grad();
            self.skipped += 1;
            m.skipped = true;
            return m;
        }
        let DuelingCritic { encoder, head, .. } = &mut self.online;
        clip_grad_norm(&mut [encoder, head], self.cfg.grad_clip);
        self.opt_head.step(head, self.cfg.head_lr);
        self.opt_enc.step(encoder, self.cfg.encoder_lr);
        self.target.ema_towards(&self.online.flat_values(), self.cfg.tau);
        m.critic_loss = loss;
        m.mean_q = tape.mean_q;
        m
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon(self.step)
    }

    pub fn policy(&self, epsilon: f64) -> DqnPolicy<'_> {
        DqnPolicy {
            critic: &self.online,
            epsilon,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DqnHeader {
            cfg: self.cfg.clone(),
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            step: self.step,
            skipped: self.skipped,
            optimizers: vec![self.opt_head.clone(), self.opt_enc.clone()],
        };
        let arrays = vec![
            self.online.flat_values(),
            self.target.flat_values(),
            self.opt_head.m.clone(),
            self.opt_head.v.clone(),
            self.opt_enc.m.clone(),
            self.opt_enc.v.clone(),
        ];
        ckpt::write(path.as_ref(), MAGIC, VERSION, &header, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, arrays): (DqnHeader, Vec<Vec<f64>>) = ckpt::read(path.as_ref(), MAGIC, VERSION)?;
        if arrays.len() != 6 || h.optimizers.len() != 2 {
            return Err(Error::Checkpoint("unexpected agent checkpoint layout".into()));
        }
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init, &[]);
        let mut agent = DqnAgent::new(h.obs_dim, h.n_actions, h.cfg, &mut rng)?;
        for (p, a) in [(&mut agent.online, &arrays[0]), (&mut agent.target, &arrays[1])] {
            if p.num_params() != a.len() {
                return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
            }
            p.set_flat_values(a);
        }
        let mut opts = h.optimizers.into_iter();
        agent.opt_head = opts.next().unwrap();
        agent.opt_head.m = arrays[2].clone();
        agent.opt_head.v = arrays[3].clone();
        agent.opt_enc = opts.next().unwrap();
        agent.opt_enc.m = arrays[4].clone();
        agent.opt_enc.v = arrays[5].clone();
        agent.step = h.step;
        agent.skipped = h.skipped;
        Ok(agent)
    }
}

/// ε-greedy over the dueling Q values; actions are one-hot vectors.
#[derive(Debug, Clone, Copy)]
pub struct DqnPolicy<'a> {
    pub critic: &'a DuelingCritic,
    pub epsilon: f64,
}

impl DqnPolicy<'_> {
    pub fn q_values(&self, state: &(EncoderState, Vec<f64>)) -> Vec<f64> {
        let z = Array2::from_shape_vec((1, state.1.len()), state.1.clone()).unwrap();
        self.critic.q_from_features(&z).row(0).to_vec()
    }
}

impl RolloutPolicy for DqnPolicy<'_> {
    type State = (EncoderState, Vec<f64>);

    fn start(&self) -> Self::State {
        (self.critic.encoder.initial_state(), Vec::new())
    }

    fn observe(&self, state: &mut Self::State, obs: &[f64]) {
        state.1 = self.critic.encoder.step(&mut state.0, obs);
    }

    fn act(&self, state: &Self::State, rng: &mut Rng) -> Vec<f64> {
        let n = self.critic.n_actions;
        let a = if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            rng.random_range(0..n)
        } else {
            argmax(&self.q_values(state))
        };
        one_hot(a, n)
    }
}
