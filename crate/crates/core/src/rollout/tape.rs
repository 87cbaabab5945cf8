//! Replay tape of variable-length sequences with inline reset markers.
//!
//! Entry `j` of a sequence holds the encoder input `(s_j, a_{j−1}, r_j)` and,
//! when a transition leaves it, the action `a_j`, reward `r_{j+1}` and
//! terminal flag `d_{j+1}`. The last entry of a sequence has no transition.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ImaginedTrajectory;
use crate::env::{history_obs, OfflineDataset};
use crate::rng::Rng;
use crate::{ckpt, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    obs_dim: usize,
    action_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub has_transition: Vec<bool>,
    pub is_real: Vec<bool>,
}

impl Sequence {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            has_transition: Vec::new(),
            is_real: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.has_transition.iter().filter(|&&b| b).count()
    }

    /// Appends an entry with no outgoing transition.
    pub fn push_obs(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.obs_dim);
        self.obs.extend_from_slice(obs);
        self.actions.extend(std::iter::repeat_n(0.0, self.action_dim));
        self.rewards.push(0.0);
        self.terminals.push(false);
        self.has_transition.push(false);
        self.is_real.push(false);
    }

    /// Attaches a transition to the most recent entry.
    pub fn set_transition(&mut self, action: &[f64], reward: f64, terminal: bool, real: bool) {
        let j = self.len() - 1;
        assert_eq!(action.len(), self.action_dim);
        self.actions[j * self.action_dim..(j + 1) * self.action_dim].copy_from_slice(action);
        self.rewards[j] = reward;
        self.terminals[j] = terminal;
        self.has_transition[j] = true;
        self.is_real[j] = real;
    }

    pub fn obs_row(&self, j: usize) -> &[f64] {
        &self.obs[j * self.obs_dim..(j + 1) * self.obs_dim]
    }

    pub fn action_row(&self, j: usize) -> &[f64] {
        &self.actions[j * self.action_dim..(j + 1) * self.action_dim]
    }

    /// Real prefix `h_t` followed by the imagined continuation.
    pub fn from_rollout(ds: &OfflineDataset, r: &ImaginedTrajectory) -> Self {
        let tr = ds.trajectory(r.history.trajectory);
        let mut seq = Sequence::new(ds.obs_dim(), ds.action_dim());
        for (j, obs) in ds.history_obs(r.history).iter().enumerate() {
            seq.push_obs(obs);
            if j < r.history.t {
                seq.set_transition(&tr.actions[j], tr.rewards[j], tr.terminals[j], true);
            }
        }
        for k in 0..r.imagined_len() {
            seq.set_transition(&r.actions[k], r.rewards[k], r.flags[k].terminal, false);
            seq.push_obs(&history_obs(&r.next_states[k], Some(&r.actions[k]), r.rewards[k], ds.action_dim()));
        }
        seq
    }
}

/// `(w_real, w_imag)` per-step weights of one sequence. When one segment is
/// empty the other receives full weight.
pub fn mixed_weights(n_real: usize, n_imag: usize, kappa: f64) -> Result<(f64, f64)> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid(format!("real data ratio κ = {kappa} outside (0, 1)")));
    }
    Ok(match (n_real, n_imag) {
        (0, 0) => (0.0, 0.0),
        (r, 0) => (1.0 / r as f64, 0.0),
        (0, i) => (0.0, 1.0 / i as f64),
        (r, i) => (kappa / r as f64, (1.0 - kappa) / i as f64),
    })
}

/// `κ/t·Σ real + (1 − κ)/(t' − t)·Σ imagined`.
pub fn mixed_loss(real: &[f64], imagined: &[f64], kappa: f64) -> Result<f64> {
    let (wr, wi) = mixed_weights(real.len(), imagined.len(), kappa)?;
    Ok(wr * real.iter().sum::<f64>() + wi * imagined.iter().sum::<f64>())
}

/// Concatenated sequences ready for one gradient step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub has_transition: Vec<bool>,
    pub is_real: Vec<bool>,
    pub resets: Vec<bool>,
    /// Loss weight of each transition; sums to 1 over the batch.
    pub weights: Vec<f64>,
    pub n_sequences: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&Sequence], kappa: f64) -> Result<Self> {
        let obs_dim = seqs[0].obs_dim;
        let action_dim = seqs[0].action_dim;
        let len: usize = seqs.iter().map(|s| s.len()).sum();
        let mut obs = Vec::with_capacity(len * obs_dim);
        let mut actions = Vec::with_capacity(len * action_dim);
        let mut b = Batch {
            obs: Array2::zeros((0, obs_dim)),
            actions: Array2::zeros((0, action_dim)),
            rewards: Vec::with_capacity(len),
            terminals: Vec::with_capacity(len),
            has_transition: Vec::with_capacity(len),
            is_real: Vec::with_capacity(len),
            resets: Vec::with_capacity(len),
            weights: Vec::with_capacity(len),
            n_sequences: 0,
        };
        let counted = seqs.iter().filter(|s| s.num_transitions() > 0).count().max(1) as f64;
        for s in seqs {
            obs.extend_from_slice(&s.obs);
            actions.extend_from_slice(&s.actions);
            b.rewards.extend_from_slice(&s.rewards);
            b.terminals.extend_from_slice(&s.terminals);
            b.has_transition.extend_from_slice(&s.has_transition);
            b.is_real.extend_from_slice(&s.is_real);
            b.resets.extend((0..s.len()).map(|j| j == 0));
            let n_real = (0..s.len()).filter(|&j| s.has_transition[j] && s.is_real[j]).count();
            let n_imag = s.num_transitions() - n_real;
            let (wr, wi) = mixed_weights(n_real, n_imag, kappa)?;
            b.weights.extend((0..s.len()).map(|j| match (s.has_transition[j], s.is_real[j]) {
                (false, _) => 0.0,
                (true, true) => wr / counted,
                (true, false) => wi / counted,
            }));
            b.n_sequences += 1;
        }
        b.obs = Array2::from_shape_vec((len, obs_dim), obs).expect("obs shape");
        b.actions = Array2::from_shape_vec((len, action_dim), actions).expect("action shape");
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTape {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    seqs: VecDeque<Sequence>,
    total: usize,
    appended: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TapeHeader {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    sequences: usize,
    appended: u64,
}

const MAGIC: &[u8; 4] = b"NBTP";
const VERSION: u32 = 1;

impl ReplayTape {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        Self {
            capacity,
            obs_dim,
            action_dim,
            seqs: VecDeque::new(),
            total: 0,
            appended: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total entries across live sequences.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &Sequence> {
        self.seqs.iter()
    }

    /// Count of reset markers, one per live sequence start.
    pub fn num_resets(&self) -> usize {
        self.seqs.len()
    }

    /// Sequences ever appended, including evicted ones.
    pub fn appended(&self) -> u64 {
        self.appended
    }

    /// Appends a sequence, evicting whole sequences from the front as needed.
    pub fn append(&mut self, seq: Sequence) -> Result<()> {
        if seq.len() > self.capacity {
            return Err(Error::Capacity {
                len: seq.len(),
                capacity: self.capacity,
            });
        }
        if seq.obs_dim != self.obs_dim || seq.action_dim != self.action_dim {
            return Err(Error::Dimension("sequence dimensions differ from the tape".into()));
        }
        while self.total + seq.len() > self.capacity {
            let old = self.seqs.pop_front().expect("capacity accounting");
            self.total -= old.len();
        }
        self.total += seq.len();
        self.seqs.push_back(seq);
        self.appended += 1;
        Ok(())
    }

    pub fn append_rollout(&mut self, ds: &OfflineDataset, r: &ImaginedTrajectory) -> Result<()> {
        self.append(Sequence::from_rollout(ds, r))
    }

    /// Draws whole sequences uniformly (with replacement) until the batch holds
    /// at least `min_len` entries.
    pub fn sample_batch(&self, min_len: usize, kappa: f64, rng: &mut Rng) -> Result<Batch> {
        if self.seqs.is_empty() {
            return Err(Error::invalid("sampling from an empty tape"));
        }
        let mut picked: Vec<&Sequence> = Vec::new();
        let mut len = 0;
        while len < min_len.max(1) {
            let s = &self.seqs[rng.random_range(0..self.seqs.len())];
            len += s.len();
            picked.push(s);
        }
        Batch::from_sequences(&picked, kappa)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = TapeHeader {
            capacity: self.capacity,
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            sequences: self.seqs.len(),
            appended: self.appended,
        };
        let mut arrays = Vec::with_capacity(4 * self.seqs.len());
        for s in &self.seqs {
            arrays.push(s.obs.clone());
            arrays.push(s.actions.clone());
            arrays.push(s.rewards.clone());
            arrays.push(
                (0..s.len())
                    .map(|j| (s.terminals[j] as u8 | (s.has_transition[j] as u8) << 1 | (s.is_real[j] as u8) << 2) as f64)
                    .collect(),
            );
        }
        ckpt::write(path.as_ref(), MAGIC, VERSION, &header, &arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, arrays): (TapeHeader, Vec<Vec<f64>>) = ckpt::read(path.as_ref(), MAGIC, VERSION)?;
        if arrays.len() != 4 * h.sequences {
            return Err(Error::Checkpoint("tape array count mismatch".into()));
        }
        let mut tape = ReplayTape::new(h.capacity, h.obs_dim, h.action_dim);
        for c in arrays.chunks_exact(4) {
            let bits: Vec<u8> = c[3].iter().map(|&b| b as u8).collect();
            let seq = Sequence {
                obs_dim: h.obs_dim,
                action_dim: h.action_dim,
                obs: c[0].clone(),
                actions: c[1].clone(),
                rewards: c[2].clone(),
                terminals: bits.iter().map(|b| b & 1 != 0).collect(),
                has_transition: bits.iter().map(|b| b & 2 != 0).collect(),
                is_real: bits.iter().map(|b| b & 4 != 0).collect(),
            };
            tape.append(seq)?;
        }
        tape.appended = h.appended;
        Ok(tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(len: usize) -> Sequence {
        let mut s = Sequence::new(1, 1);
        for j in 0..len {
            s.push_obs(&[j as f64]);
            if j + 1 < len {
                s.set_transition(&[0.5], 1.0, false, j == 0);
            }
        }
        s
    }

    #[test]
    fn append_and_evict_whole_sequences() {
        let mut tape = ReplayTape::new(10, 1, 1);
        tape.append(seq(5)).unwrap();
        assert_eq!((tape.len(), tape.num_resets()), (5, 1));
        let mut tape = ReplayTape::new(10, 1, 1);
        tape.append(seq(6)).unwrap();
        let mut second = seq(6);
        second.rewards[0] = 42.0;
        tape.append(second).unwrap();
        assert_eq!(tape.num_sequences(), 1);
        assert_eq!(tape.sequences().next().unwrap().rewards[0], 42.0);
        assert!(matches!(tape.append(seq(11)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn mixed_loss_examples() {
        assert!((mixed_loss(&[2.0, 4.0], &[6.0], 0.5).unwrap() - 4.5).abs() < 1e-12);
        assert!((mixed_loss(&[2.0, 4.0], &[], 0.3).unwrap() - 3.0).abs() < 1e-12);
        assert!(mixed_loss(&[1.0], &[1.0], 1.0).is_err());
        assert!(mixed_loss(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn batch_resets_and_weights() {
        let mut tape = ReplayTape::new(100, 1, 1);
        tape.append(seq(3)).unwrap();
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Update, &[]);
        let b = tape.sample_batch(7, 0.25, &mut rng).unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!(b.resets.iter().filter(|&&r| r).count(), 3);
        assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b.weights[0] - 0.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tape_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tape.ckpt");
        let mut tape = ReplayTape::new(20, 1, 1);
        tape.append(seq(4)).unwrap();
        tape.append(seq(2)).unwrap();
        tape.save(&p).unwrap();
        assert_eq!(ReplayTape::load(&p).unwrap(), tape);
    }
}
