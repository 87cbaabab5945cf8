use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::{squash_backward, squash_sample, ActMode, Actor, AgentConfig, CriticEnsemble, EntropyMode, UpdateMetrics};
use crate::env::OfflineDataset;
use crate::nn::{clip_grad_norm, AdamW, EncoderState, LruEncoderCache, MlpCache, Params};
use crate::rng::Rng;
use crate::rollout::{Batch, ReplayTape, RolloutPolicy};
use crate::{ckpt, Error, Result};

/// Scalar parameter (the entropy temperature in log space).
#[derive(Debug, Clone, Copy, Default)]
struct Scalar {
    v: [f64; 1],
    g: [f64; 1],
}

impl Params for Scalar {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.v, &self.g);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.v, &mut self.g);
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub cfg: AgentConfig,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub actor: Actor,
    pub critic: CriticEnsemble,
    pub target: CriticEnsemble,
    log_alpha: Scalar,
    opt_actor_head: AdamW,
    opt_actor_enc: AdamW,
    opt_critic_heads: AdamW,
    opt_critic_enc: AdamW,
    opt_alpha: AdamW,
    pub step: u64,
    pub skipped: u64,
}

pub(crate) fn select(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

pub(crate) fn scatter(rows: &Array2<f64>, idx: &[usize], total: usize) -> Array2<f64> {
    let mut out = Array2::zeros((total, rows.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(i).assign(&rows.row(r));
    }
    out
}

/// Row indices of a batch that carry a transition, and their successors.
pub fn transition_rows(batch: &Batch) -> (Vec<usize>, Vec<usize>) {
    let idx: Vec<usize> = (0..batch.len()).filter(|&j| batch.has_transition[j]).collect();
    let next = idx.iter().map(|j| j + 1).collect();
    (idx, next)
}

/// Forward state of the critic objective.
pub struct CriticTape {
    enc: LruEncoderCache,
    heads: Vec<MlpCache>,
    g_q: Vec<Vec<f64>>,
    idx: Vec<usize>,
}

/// `Σ_j w_j · mean_k (Q_k(h_j, a_j) − y_j)²` over transition rows.
pub fn critic_objective(critic: &CriticEnsemble, batch: &Batch, targets: &[f64]) -> (f64, CriticTape) {
    let (idx, _) = transition_rows(batch);
    let (z, enc) = critic.encoder.forward(&batch.obs, &batch.resets);
    let x = CriticEnsemble::head_input(&select(&z, &idx), &select(&batch.actions, &idx));
    let k = critic.heads.len() as f64;
    let mut loss = 0.0;
    let mut heads = Vec::with_capacity(critic.heads.len());
    let mut g_q = Vec::with_capacity(critic.heads.len());
    for h in 0..critic.heads.len() {
        let (q, cache) = critic.head_forward(h, &x);
        let mut g = vec![0.0; q.len()];
        for (r, &j) in idx.iter().enumerate() {
            let e = q[r] - targets[r];
            loss += batch.weights[j] * e * e / k;
            g[r] = 2.0 * batch.weights[j] * e / k;
        }
        heads.push(cache);
        g_q.push(g);
    }
    (loss, CriticTape { enc, heads, g_q, idx })
}

pub fn critic_backprop(critic: &mut CriticEnsemble, tape: &CriticTape, batch: &Batch) {
    let z_dim = critic.encoder.out_dim();
    let mut g_z = Array2::zeros((tape.idx.len(), z_dim));
    for (h, cache) in tape.heads.iter().enumerate() {
        let g = Array2::from_shape_vec((tape.g_q[h].len(), 1), tape.g_q[h].clone()).unwrap();
        let gx = critic.heads[h].backward(cache, &g, true);
        g_z += &CriticEnsemble::split_input_grad(&gx, z_dim).0;
    }
    let gz_full = scatter(&g_z, &tape.idx, batch.len());
    critic.encoder.backward(&tape.enc, &batch.resets, &gz_full);
}

/// Forward state of the actor objective.
pub struct ActorTape {
    enc: LruEncoderCache,
    head: MlpCache,
    squashed: super::Squashed,
    critic_caches: Vec<MlpCache>,
    idx: Vec<usize>,
    weights: Vec<f64>,
    alpha: f64,
    pub log_prob: Vec<f64>,
}

/// `Σ_j w_j (α log π(ã_j|h_j) − mean_k Q_k(h_j, ã_j))` with `ã_j` drawn by
/// reparameterization from `noise`. `z_critic` holds critic features of the
/// transition rows and is treated as constant.
pub fn actor_objective(
    actor: &Actor,
    critic: &CriticEnsemble,
    batch: &Batch,
    z_critic: &Array2<f64>,
    alpha: f64,
    noise: Array2<f64>,
) -> (f64, ActorTape) {
    let (idx, _) = transition_rows(batch);
    let (z, enc) = actor.encoder.forward(&batch.obs, &batch.resets);
    let (raw, head) = actor.head.forward(&select(&z, &idx));
    let squashed = squash_sample(&raw, actor.action_dim, noise);
    let x = CriticEnsemble::head_input(z_critic, &squashed.action);
    let k = critic.heads.len() as f64;
    let weights: Vec<f64> = idx.iter().map(|&j| batch.weights[j]).collect();
    let mut loss: f64 = weights.iter().zip(&squashed.log_prob).map(|(w, lp)| w * alpha * lp).sum();
    let mut critic_caches = Vec::with_capacity(critic.heads.len());
    for h in 0..critic.heads.len() {
        let (q, cache) = critic.head_forward(h, &x);
        loss -= weights.iter().zip(&q).map(|(w, q)| w * q / k).sum::<f64>();
        critic_caches.push(cache);
    }
    let log_prob = squashed.log_prob.clone();
    (
        loss,
        ActorTape {
            enc,
            head,
            squashed,
            critic_caches,
            idx,
            weights,
            alpha,
            log_prob,
        },
    )
}

pub fn actor_backprop(actor: &mut Actor, critic: &CriticEnsemble, tape: &ActorTape, batch: &Batch) {
    let n = tape.idx.len();
    let z_dim = critic.encoder.out_dim();
    let k = critic.heads.len() as f64;
    let g_q = Array2::from_shape_fn((n, 1), |(r, _)| -tape.weights[r] / k);
    let mut g_a = Array2::zeros((n, actor.action_dim));
    for (h, cache) in tape.critic_caches.iter().enumerate() {
        let gx = critic.heads[h].input_grad(cache, &g_q);
        g_a += &CriticEnsemble::split_input_grad(&gx, z_dim).1;
    }
    let g_logp: Vec<f64> = tape.weights.iter().map(|w| w * tape.alpha).collect();
    let g_raw = squash_backward(&tape.squashed, &g_a, &g_logp);
    let g_z = actor.head.backward(&tape.head, &g_raw, true);
    let gz_full = scatter(&g_z, &tape.idx, batch.len());
    actor.encoder.backward(&tape.enc, &batch.resets, &gz_full);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SacHeader {
    cfg: AgentConfig,
    obs_dim: usize,
    action_dim: usize,
    log_alpha: f64,
    step: u64,
    skipped: u64,
    optimizers: Vec<AdamW>,
}

const MAGIC: &[u8; 4] = b"NBSA";
const VERSION: u32 = 1;

impl SacAgent {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: AgentConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let actor = Actor::new(obs_dim, action_dim, &cfg, rng);
        let critic = CriticEnsemble::new(obs_dim, action_dim, &cfg, rng);
        let alpha0 = match cfg.entropy {
            EntropyMode::Fixed(a) => a,
            EntropyMode::Auto(_) => cfg.initial_alpha,
        };
        Ok(Self {
            obs_dim,
            action_dim,
            target: critic.clone(),
            actor,
            critic,
            log_alpha: Scalar {
                v: [alpha0.ln()],
                g: [0.0],
            },
            opt_actor_head: AdamW::new(0.0),
            opt_actor_enc: AdamW::new(0.0),
            opt_critic_heads: AdamW::new(0.0),
            opt_critic_enc: AdamW::new(0.0),
            opt_alpha: AdamW::new(0.0),
            step: 0,
            skipped: 0,
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.v[0].exp()
    }

    pub fn target_entropy(&self) -> f64 {
        match self.cfg.entropy {
            EntropyMode::Auto(Some(t)) => t,
            _ => -(self.action_dim as f64),
        }
    }

    /// Bootstrap targets `r + γ(1 − d)(min_{k∈S} Q̄_k(h', a') − α log π(a'|h'))`
    /// for the transition rows, with `S` a random subset of target heads.
    pub fn td_targets(&self, batch: &Batch, z_actor: &Array2<f64>, rng: &mut Rng) -> Vec<f64> {
        let (idx, next) = transition_rows(batch);
        let (zt, _) = self.target.encoder.forward(&batch.obs, &batch.resets);
        let raw = self.actor.head.predict(&select(z_actor, &next));
        let sq = squash_sample(&raw, self.action_dim, self.actor.noise(next.len(), rng));
        let x = CriticEnsemble::head_input(&select(&zt, &next), &sq.action);
        let heads = sample_indices(rng, self.cfg.n_critics, self.cfg.critic_subsample);
        let mut qmin = vec![f64::INFINITY; next.len()];
        for h in heads.iter() {
            let q = self.target.heads[h].predict(&x);
            for (m, v) in qmin.iter_mut().zip(q.column(0)) {
                *m = m.min(*v);
            }
        }
        let alpha = self.alpha();
        idx.iter()
            .enumerate()
            .map(|(r, &j)| {
                let cont = if batch.terminals[j] { 0.0 } else { 1.0 };
                batch.rewards[j] + self.cfg.gamma * cont * (qmin[r] - alpha * sq.log_prob[r])
            })
            .collect()
    }

    pub fn update(&mut self, tape: &ReplayTape, rng: &mut Rng) -> Result<UpdateMetrics> {
        let batch = tape.sample_batch(self.cfg.batch_len, self.cfg.kappa, rng)?;
        Ok(self.update_on_batch(&batch, rng))
    }

    /// One gradient step on critic, actor and temperature, then target averaging.
    pub fn update_on_batch(&mut self, batch: &Batch, rng: &mut Rng) -> UpdateMetrics {
        let (idx, _) = transition_rows(batch);
        let mut m = UpdateMetrics {
            alpha: self.alpha(),
            ..Default::default()
        };
        if idx.is_empty() {
            m.skipped = true;
            return m;
        }
        let (z_actor, _) = self.actor.encoder.forward(&batch.obs, &batch.resets);
        let targets = self.td_targets(batch, &z_actor, rng);

        self.critic.zero_grad();
        let (c_loss, c_tape) = critic_objective(&self.critic, batch, &targets);
        critic_backprop(&mut self.critic, &c_tape, batch);
        if !c_loss.is_finite() || !self.critic.grads_finite() {
            log::warn!("non-finite critic gradient at step {}; update skipped", self.step);
            self.critic.zero_grad();
            self.skipped += 1;
            self.step += 1;
            m.skipped = true;
            return m;
        }
        {
            let CriticEnsemble { encoder, heads } = &mut self.critic;
            clip_grad_norm(&mut [encoder, heads], self.cfg.grad_clip);
            self.opt_critic_heads.step(heads, self.cfg.head_lr);
            self.opt_critic_enc.step(encoder, self.cfg.encoder_lr);
        }

        let (zq, _) = self.critic.encoder.forward(&batch.obs, &batch.resets);
        let zq = select(&zq, &idx);
        let noise = self.actor.noise(idx.len(), rng);
        self.actor.zero_grad();
        let (a_loss, a_tape) = actor_objective(&self.actor, &self.critic, batch, &zq, self.alpha(), noise);
        actor_backprop(&mut self.actor, &self.critic, &a_tape, batch);
        let weights: Vec<f64> = idx.iter().map(|&j| batch.weights[j]).collect();
        let mean_logp: f64 = weights.iter().zip(&a_tape.log_prob).map(|(w, l)| w * l).sum();
        if a_loss.is_finite() && self.actor.grads_finite() {
            let scale = self.cfg.actor_lr_scale(self.step);
            let Actor { encoder, head, .. } = &mut self.actor;
            clip_grad_norm(&mut [encoder, head], self.cfg.grad_clip);
            self.opt_actor_head.step(head, self.cfg.head_lr * scale);
            self.opt_actor_enc.step(encoder, self.cfg.encoder_lr * scale);
        } else {
            log::warn!("non-finite actor gradient at step {}; actor step skipped", self.step);
            self.actor.zero_grad();
            m.skipped = true;
        }

        if let EntropyMode::Auto(_) = self.cfg.entropy {
            // ∂/∂log α of −log α · (log π + H̄).
            self.log_alpha.g[0] = -(mean_logp + self.target_entropy());
            if self.log_alpha.g[0].is_finite() {
                self.opt_alpha.step(&mut self.log_alpha, self.cfg.alpha_lr);
            }
        }

        self.target.ema_towards(&self.critic.flat_values(), self.cfg.tau);
        self.step += 1;
        let q_mean = {
            let x = CriticEnsemble::head_input(&zq, &select(&batch.actions, &idx));
            let qs = self.critic.q_all(&x);
            let k = qs.len() as f64;
            (0..idx.len())
                .map(|r| weights[r] * qs.iter().map(|q| q[r]).sum::<f64>() / k)
                .sum()
        };
        UpdateMetrics {
            critic_loss: c_loss,
            actor_loss: a_loss,
            alpha: self.alpha(),
            mean_q: q_mean,
            entropy: -mean_logp,
            skipped: m.skipped,
        }
    }

    pub fn policy(&self, mode: ActMode) -> ActorPolicy<'_> {
        ActorPolicy {
            actor: &self.actor,
            mode,
        }
    }

    /// Mean critic value `E_{(h,a)∼D}[Q(h, a)]` over the first `max_traj`
    /// trajectories of the dataset.
    pub fn dataset_mean_q(&self, ds: &OfflineDataset, max_traj: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, tr) in ds.trajectories().iter().enumerate().take(max_traj) {
            let obs = ds.history_obs(crate::env::History { trajectory: i, t: tr.len() });
            let obs = Array2::from_shape_vec((obs.len(), ds.obs_dim()), obs.concat()).unwrap();
            let resets: Vec<bool> = (0..obs.nrows()).map(|j| j == 0).collect();
            let (z, _) = self.critic.encoder.forward(&obs, &resets);
            let rows: Vec<usize> = (0..tr.len()).collect();
            let a = Array2::from_shape_vec((tr.len(), ds.action_dim()), tr.actions.concat()).unwrap();
            let x = CriticEnsemble::head_input(&select(&z, &rows), &a);
            let qs = self.critic.q_all(&x);
            for r in 0..tr.len() {
                total += qs.iter().map(|q| q[r]).sum::<f64>() / qs.len() as f64;
            }
            count += tr.len();
        }
        total / count.max(1) as f64
    }

    fn optimizers(&self) -> [&AdamW; 5] {
        [
            &self.opt_actor_head,
            &self.opt_actor_enc,
            &self.opt_critic_heads,
            &self.opt_critic_enc,
            &self.opt_alpha,
        ]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = SacHeader {
            cfg: self.cfg.clone(),
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            log_alpha: self.log_alpha.v[0],
            step: self.step,
            skipped: self.skipped,
            optimizers: self.optimizers().iter().map(|o| (*o).clone()).collect(),
        };
        let mut arrays = vec![
            self.actor.flat_values(),
            self.critic.flat_values(),
            self.target.flat_values(),
        ];
        for o in self.optimizers() {
            arrays.push(o.m.clone());
            arrays.push(o.v.clone());
        }
        ckpt::write(path.as_ref(), MAGIC, VERSION, &header, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, arrays): (SacHeader, Vec<Vec<f64>>) = ckpt::read(path.as_ref(), MAGIC, VERSION)?;
        if arrays.len() != 13 || h.optimizers.len() != 5 {
            return Err(Error::Checkpoint("unexpected agent checkpoint layout".into()));
        }
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init, &[]);
        let mut agent = SacAgent::new(h.obs_dim, h.action_dim, h.cfg, &mut rng)?;
        for (p, a) in [
            (&mut agent.actor as &mut dyn Params, &arrays[0]),
            (&mut agent.critic, &arrays[1]),
            (&mut agent.target, &arrays[2]),
        ] {
            if p.num_params() != a.len() {
                return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
            }
            p.set_flat_values(a);
        }
        let mut opts = h.optimizers.into_iter();
        for (i, slot) in [
            &mut agent.opt_actor_head,
            &mut agent.opt_actor_enc,
            &mut agent.opt_critic_heads,
            &mut agent.opt_critic_enc,
            &mut agent.opt_alpha,
        ]
        .into_iter()
        .enumerate()
        {
            *slot = opts.next().unwrap();
            slot.m = arrays[3 + 2 * i].clone();
            slot.v = arrays[4 + 2 * i].clone();
        }
        agent.log_alpha.v[0] = h.log_alpha;
        agent.step = h.step;
        agent.skipped = h.skipped;
        Ok(agent)
    }
}

/// Actor driven online through a history.
#[derive(Debug, Clone, Copy)]
pub struct ActorPolicy<'a> {
    pub actor: &'a Actor,
    pub mode: ActMode,
}

impl RolloutPolicy for ActorPolicy<'_> {
    type State = (EncoderState, Vec<f64>);

    fn start(&self) -> Self::State {
        (self.actor.encoder.initial_state(), Vec::new())
    }

    fn observe(&self, state: &mut Self::State, obs: &[f64]) {
        state.1 = self.actor.encoder.step(&mut state.0, obs);
    }

    fn act(&self, state: &Self::State, rng: &mut Rng) -> Vec<f64> {
        self.actor.act_from_feature(&state.1, self.mode, rng)
    }
}
