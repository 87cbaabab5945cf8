//! Run orchestration: ensemble pretraining, alternating rollout rounds and
//! gradient steps, periodic evaluation, metric files and resumable
//! checkpoints.
//!
//! Output directory layout:
//! `config.json`, `manifest.json`, `ensemble.ckpt`, `agent.ckpt`,
//! `tape.ckpt`, `state.json`, `metrics.csv`, `horizons.csv`, `timing.csv`
//! and a `.lock` file held while a run is active.

mod config;

pub use config::{apply_override, EvalEnv, RunConfig};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{evaluate, ActMode, EvalReport, SacAgent, UpdateMetrics};
use crate::env::{load_dataset, normalized_score, NeverTerminal, OfflineDataset};
use crate::rng::{stream, Stream};
use crate::rollout::{round_horizons, rollout_round, HorizonStats, ReplayTape, RolloutSpec, StopReason};
use crate::world::{UncertaintyThreshold, WorldEnsemble};
use crate::{Error, Result};

pub const STATE_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "step,round,updates,skipped,critic_loss,actor_loss,alpha,entropy,batch_q,\
dataset_q,eval_return,eval_std,eval_discounted,normalized_score,horizon_median,horizon_q25,horizon_q75,horizon_max";

pub const HORIZONS_HEADER: &str =
    "round,step,rollouts,median,q25,q75,max,terminal,unc_trunc,timeout,nonfinite";

/// Running sums of update metrics since the last flushed record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub updates: u64,
    pub skipped: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub batch_q: f64,
}

impl Accumulator {
    fn add(&mut self, m: &UpdateMetrics) {
        self.updates += 1;
        if m.skipped {
            self.skipped += 1;
            return;
        }
        self.critic_loss += m.critic_loss;
        self.actor_loss += m.actor_loss;
        self.alpha += m.alpha;
        self.entropy += m.entropy;
        self.batch_q += m.mean_q;
    }

    fn means(&self) -> [f64; 5] {
        let n = (self.updates - self.skipped) as f64;
        if n == 0.0 {
            return [f64::NAN; 5];
        }
        [
            self.critic_loss / n,
            self.actor_loss / n,
            self.alpha / n,
            self.entropy / n,
            self.batch_q / n,
        ]
    }
}

/// Progress persisted after every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub round: u64,
    pub step: u64,
    pub accumulator: Accumulator,
    pub last_horizons: Option<HorizonStats>,
    pub threshold: UncertaintyThreshold,
    pub completed: bool,
}

/// One flushed metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub round: u64,
    pub updates: u64,
    pub skipped: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub batch_q: f64,
    pub dataset_q: f64,
    pub eval_return: f64,
    pub eval_std: f64,
    pub eval_discounted: f64,
    pub normalized_score: f64,
    pub horizons: Option<HorizonStats>,
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        let h = self.horizons.map_or([f64::NAN; 4], |h| [h.median, h.q25, h.q75, h.max]);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.round,
            self.updates,
            self.skipped,
            self.critic_loss,
            self.actor_loss,
            self.alpha,
            self.entropy,
            self.batch_q,
            self.dataset_q,
            self.eval_return,
            self.eval_std,
            self.eval_discounted,
            self.normalized_score,
            h[0],
            h[1],
            h[2],
            h[3]
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 18 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("metrics row has {} fields", f.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad number `{}`", f[i]),
            })
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad integer `{}`", f[i]),
            })
        };
        let h = [num(14)?, num(15)?, num(16)?, num(17)?];
        Ok(Self {
            step: int(0)?,
            round: int(1)?,
            updates: int(2)?,
            skipped: int(3)?,
            critic_loss: num(4)?,
            actor_loss: num(5)?,
            alpha: num(6)?,
            entropy: num(7)?,
            batch_q: num(8)?,
            dataset_q: num(9)?,
            eval_return: num(10)?,
            eval_std: num(11)?,
            eval_discounted: num(12)?,
            normalized_score: num(13)?,
            horizons: (!h[0].is_nan()).then_some(HorizonStats {
                median: h[0],
                q25: h[1],
                q75: h[2],
                max: h[3],
            }),
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRecord::from_csv).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub dataset_sha256: String,
    pub ensemble_sha256: String,
    pub state_version: u32,
    pub package_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub step: u64,
    pub round: u64,
    pub completed: bool,
    /// True when `resume` found the run already finished.
    pub already_complete: bool,
    pub last_record: Option<MetricsRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Exclusive claim on an output directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows whose first integer column passes `keep`.
fn truncate_csv(path: &Path, keep: impl Fn(u64, u64) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split(',');
        let a = cols.next().and_then(|c| c.parse::<u64>().ok());
        let b = cols.next().and_then(|c| c.parse::<u64>().ok());
        let retain = match (i, a, b) {
            (0, _, _) => true,
            (_, Some(a), Some(b)) => keep(a, b),
            _ => false,
        };
        if retain {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

/// A run in progress: all state needed to continue deterministically.
pub struct Trainer {
    pub cfg: RunConfig,
    pub ds: OfflineDataset,
    pub world: WorldEnsemble,
    pub agent: SacAgent,
    pub tape: ReplayTape,
    pub state: RunState,
    out: PathBuf,
    _lock: DirLock,
    world_fingerprint: Vec<f64>,
    /// Start of the current metrics interval.
    interval_start: Instant,
}

impl Trainer {
    /// Starts a fresh run in `cfg.out_dir`, pretraining or loading the ensemble.
    pub fn create(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let lock = DirLock::acquire(&out)?;
        if out.join("state.json").exists() {
            return Err(Error::invalid(format!(
                "{} already holds a run; use resume",
                out.display()
            )));
        }
        let ds = load_dataset(&cfg.dataset)?.with_gamma(cfg.agent.gamma)?;
        let ens_path = out.join("ensemble.ckpt");
        let world = match &cfg.ensemble_ckpt {
            Some(p) => {
                let w = WorldEnsemble::load(p)?;
                if w.state_dim != ds.state_dim() || w.action_dim != ds.action_dim() {
                    return Err(Error::Dimension(format!(
                        "ensemble is {}→{}, dataset is {}→{}",
                        w.state_dim,
                        w.action_dim,
                        ds.state_dim(),
                        ds.action_dim()
                    )));
                }
                w
            }
            None => {
                log::info!("pretraining ensemble: pool {} top {}", cfg.ensemble.pool_size, cfg.ensemble.top_n);
                WorldEnsemble::train(&ds, &cfg.ensemble, cfg.seed)?
            }
        };
        world.save(&ens_path)?;
        let threshold = world.quantile_threshold(&ds, cfg.zeta)?;
        log::info!("threshold ζ={} → {:.6} (dataset mean {:.6})", cfg.zeta, threshold.value, threshold.dataset_mean);
        let mut agent_cfg = cfg.agent.clone();
        agent_cfg.total_steps = cfg.total_steps;
        let agent = SacAgent::new(
            ds.obs_dim(),
            ds.action_dim(),
            agent_cfg,
            &mut stream(cfg.seed, Stream::Init, &[]),
        )?;
        let tape = ReplayTape::new(cfg.tape_capacity, ds.obs_dim(), ds.action_dim());

        write_atomic(&out.join("config.json"), &cfg.to_canonical_json()?)?;
        let manifest = Manifest {
            config: cfg.clone(),
            dataset_sha256: sha256_file(&cfg.dataset)?,
            ensemble_sha256: sha256_file(&ens_path)?,
            state_version: STATE_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_atomic(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
        write_atomic(&out.join("metrics.csv"), &format!("{METRICS_HEADER}\n"))?;
        write_atomic(&out.join("horizons.csv"), &format!("{HORIZONS_HEADER}\n"))?;
        write_atomic(&out.join("timing.csv"), "step,wall_seconds\n")?;

        let world_fingerprint = world.fingerprint();
        let mut t = Self {
            cfg,
            ds,
            world,
            agent,
            tape,
            state: RunState {
                version: STATE_VERSION,
                round: 0,
                step: 0,
                accumulator: Accumulator::default(),
                last_horizons: None,
                threshold,
                completed: false,
            },
            out,
            _lock: lock,
            world_fingerprint,
            interval_start: Instant::now(),
        };
        t.record()?;
        t.checkpoint()?;
        Ok(t)
    }

    /// Reopens the run in `dir` at its last checkpoint.
    pub fn open(dir: &Path) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        let state_path = dir.join("state.json");
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: RunState = serde_json::from_str(&text)?;
        if state.version != STATE_VERSION {
            return Err(Error::Checkpoint(format!(
                "run state version {}, expected {STATE_VERSION}",
                state.version
            )));
        }
        let cfg = RunConfig::load(&dir.join("config.json"), &[])?;
        let manifest: Manifest = {
            let p = dir.join("manifest.json");
            serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
        };
        if sha256_file(&cfg.dataset)? != manifest.dataset_sha256 {
            return Err(Error::Checkpoint("dataset content changed since the run started".into()));
        }
        if sha256_file(&dir.join("ensemble.ckpt"))? != manifest.ensemble_sha256 {
            return Err(Error::Checkpoint("ensemble checkpoint does not match the manifest".into()));
        }
        let ds = load_dataset(&cfg.dataset)?.with_gamma(cfg.agent.gamma)?;
        let world = WorldEnsemble::load(dir.join("ensemble.ckpt"))?;
        let agent = SacAgent::load(dir.join("agent.ckpt"))?;
        let tape = ReplayTape::load(dir.join("tape.ckpt"))?;
        if agent.step != state.step {
            return Err(Error::Checkpoint(format!(
                "agent checkpoint is at step {}, run state at {}",
                agent.step, state.step
            )));
        }
        // Drop rows written after the checkpoint by an interrupted process.
        let (round, step) = (state.round, state.step);
        truncate_csv(&dir.join("metrics.csv"), |s, _| s <= step)?;
        truncate_csv(&dir.join("horizons.csv"), |r, _| r < round)?;
        truncate_csv(&dir.join("timing.csv"), |s, _| s <= step)?;
        let world_fingerprint = world.fingerprint();
        Ok(Self {
            cfg,
            ds,
            world,
            agent,
            tape,
            state,
            out: dir.to_path_buf(),
            _lock: lock,
            world_fingerprint,
            interval_start: Instant::now(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn wrap<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Run {
            round: self.state.round,
            step: self.state.step,
            source: Box::new(e),
        })
    }

    fn evaluate(&self) -> Result<Option<EvalReport>> {
        let Some(mut env) = self.cfg.eval_env.pointline() else {
            return Ok(None);
        };
        let mut rng = stream(self.cfg.seed, Stream::Eval, &[self.state.step]);
        let policy = self.agent.policy(ActMode::Deterministic);
        evaluate(&policy, &mut env, self.cfg.eval_episodes, self.cfg.agent.gamma, &mut rng).map(Some)
    }

    /// Evaluates, flushes one metrics row and resets the accumulator.
    fn record(&mut self) -> Result<MetricsRecord> {
        let report = self.evaluate()?;
        let dataset_q = self.agent.dataset_mean_q(&self.ds, self.cfg.q_trajectories);
        let acc = self.state.accumulator;
        let [critic_loss, actor_loss, alpha, entropy, batch_q] = acc.means();
        let (eval_return, eval_std, eval_discounted) =
            report.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |r| (r.mean, r.std, r.discounted_mean));
        let normalized = match self.cfg.score_reference {
            Some((r, e)) if report.is_some() => normalized_score(eval_return, r, e)?,
            _ => f64::NAN,
        };
        let rec = MetricsRecord {
            step: self.state.step,
            round: self.state.round,
            updates: acc.updates,
            skipped: acc.skipped,
            critic_loss,
            actor_loss,
            alpha,
            entropy,
            batch_q,
            dataset_q,
            eval_return,
            eval_std,
            eval_discounted,
            normalized_score: normalized,
            horizons: self.state.last_horizons,
        };
        append_line(&self.out.join("metrics.csv"), &rec.to_csv())?;
        append_line(
            &self.out.join("timing.csv"),
            &format!("{},{:.3}", self.state.step, self.interval_start.elapsed().as_secs_f64()),
        )?;
        self.interval_start = Instant::now();
        self.state.accumulator = Accumulator::default();
        log::info!(
            "step {} round {}: return {:.3} dataset Q {:.3} critic loss {:.4}",
            rec.step,
            rec.round,
            rec.eval_return,
            rec.dataset_q,
            rec.critic_loss
        );
        Ok(rec)
    }

    /// Agent, tape, then the state file that commits them.
    pub fn checkpoint(&self) -> Result<()> {
        self.agent.save(self.out.join("agent.ckpt"))?;
        self.tape.save(self.out.join("tape.ckpt"))?;
        write_atomic(&self.out.join("state.json"), &serde_json::to_string_pretty(&self.state)?)
    }

    /// One rollout round followed by up to G gradient steps.
    pub fn round(&mut self) -> Result<()> {
        let spec = RolloutSpec {
            k: self.cfg.rollouts_per_round,
            threshold: self.state.threshold,
            horizon: self.ds.max_len(),
            penalty: self.cfg.penalty,
            keep_truncated_step: self.cfg.keep_truncated_step,
        };
        let round = self.state.round;
        let policy = self.agent.policy(ActMode::Stochastic);
        let rollouts = self.wrap(rollout_round(
            &self.ds,
            &self.world,
            &NeverTerminal,
            &policy,
            &spec,
            self.cfg.seed,
            round,
        ))?;
        let h = self.wrap(round_horizons(&rollouts))?;
        let count = |s: StopReason| rollouts.iter().filter(|r| r.stop == s).count();
        append_line(
            &self.out.join("horizons.csv"),
            &format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                round,
                self.state.step,
                rollouts.len(),
                h.median,
                h.q25,
                h.q75,
                h.max,
                count(StopReason::Terminal),
                count(StopReason::UncertaintyTruncation),
                count(StopReason::Timeout),
                rollouts.iter().filter(|r| r.nonfinite).count()
            ),
        )?;
        self.state.last_horizons = Some(h);
        for r in &rollouts {
            let res = self.tape.append_rollout(&self.ds, r);
            self.wrap(res)?;
        }
        let every = self.cfg.eval_every();
        for _ in 0..self.cfg.updates_per_round {
            if self.state.step >= self.cfg.total_steps {
                break;
            }
            let mut rng = stream(self.cfg.seed, Stream::Update, &[self.state.step]);
            let res = self.agent.update(&self.tape, &mut rng);
            let m = self.wrap(res)?;
            self.state.accumulator.add(&m);
            self.state.step += 1;
            if self.state.step % every == 0 || self.state.step == self.cfg.total_steps {
                let res = self.record();
                self.wrap(res)?;
            }
        }
        self.state.round += 1;
        Ok(())
    }

    /// Runs rounds until `total_steps` (or `stop_after`), checkpointing at
    /// every round that flushed metrics.
    pub fn run(&mut self) -> Result<RunSummary> {
        let mut last = None;
        while self.state.step < self.cfg.total_steps {
            let step_before = self.state.step;
            self.round()?;
            let flushed = self.state.step / self.cfg.eval_every() != step_before / self.cfg.eval_every();
            let stop = self.cfg.stop_after.is_some_and(|s| step_before < s && self.state.step >= s);
            if self.state.step >= self.cfg.total_steps {
                break;
            }
            if flushed || stop {
                self.checkpoint()?;
            }
            if stop {
                log::info!("stopping at step {} as requested", self.state.step);
                return Ok(RunSummary {
                    step: self.state.step,
                    round: self.state.round,
                    completed: false,
                    already_complete: false,
                    last_record: last,
                });
            }
        }
        if self.world.fingerprint() != self.world_fingerprint {
            return Err(Error::invalid("ensemble parameters changed during agent training"));
        }
        self.state.completed = true;
        self.checkpoint()?;
        last = read_metrics(self.out.join("metrics.csv"))?.last().copied();
        Ok(RunSummary {
            step: self.state.step,
            round: self.state.round,
            completed: true,
            already_complete: false,
            last_record: last,
        })
    }
}

pub fn train(cfg: RunConfig) -> Result<RunSummary> {
    Trainer::create(cfg)?.run()
}

pub fn resume(dir: &Path) -> Result<RunSummary> {
    let mut t = Trainer::open(dir)?;
    if t.state.completed {
        log::info!("run in {} is already complete at step {}", dir.display(), t.state.step);
        return Ok(RunSummary {
            step: t.state.step,
            round: t.state.round,
            completed: true,
            already_complete: true,
            last_record: read_metrics(dir.join("metrics.csv"))?.last().copied(),
        });
    }
    t.run()
}

/// Opens `metrics.csv` of a run for reading.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

