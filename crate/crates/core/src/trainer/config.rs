use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentConfig;
use crate::env::pointline::PointLine;
use crate::world::EnsembleConfig;
use crate::{Error, Result};

/// Online environment used for periodic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalEnv {
    None,
    PointLine { horizon: usize },
}

impl EvalEnv {
    pub fn pointline(&self) -> Option<PointLine> {
        match self {
            EvalEnv::None => None,
            EvalEnv::PointLine { horizon } => Some(PointLine::new(*horizon)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub ensemble: EnsembleConfig,
    /// Reuse a previously trained ensemble instead of pretraining.
    pub ensemble_ckpt: Option<PathBuf>,
    pub agent: AgentConfig,
    /// Rollouts per round (K).
    pub rollouts_per_round: usize,
    /// Quantile ζ of the truncation threshold.
    pub zeta: f64,
    /// Reward penalty λ (0 in the main algorithm).
    pub penalty: f64,
    pub keep_truncated_step: bool,
    /// Gradient steps per round (G).
    pub updates_per_round: usize,
    pub total_steps: u64,
    /// 0 means every 5% of `total_steps`.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_env: EvalEnv,
    /// `(random, expert)` returns for the normalized score.
    pub score_reference: Option<(f64, f64)>,
    pub tape_capacity: usize,
    /// Trajectories used for the dataset mean-Q metric.
    pub q_trajectories: usize,
    /// Checkpoint and exit at the first round boundary at or past this step.
    pub stop_after: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            out_dir: PathBuf::from("run"),
            seed: 0,
            ensemble: EnsembleConfig::default(),
            ensemble_ckpt: None,
            agent: AgentConfig::default(),
            rollouts_per_round: 100,
            zeta: 1.0,
            penalty: 0.0,
            keep_truncated_step: true,
            updates_per_round: 100,
            total_steps: 100_000,
            eval_interval: 0,
            eval_episodes: 20,
            eval_env: EvalEnv::PointLine { horizon: 50 },
            score_reference: None,
            tape_capacity: 1_000_000,
            q_trajectories: 50,
            stop_after: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::invalid(format!("ζ = {} outside [0, 1]", self.zeta)));
        }
        if self.penalty < 0.0 || !self.penalty.is_finite() {
            return Err(Error::invalid("penalty must be finite and non-negative"));
        }
        if self.rollouts_per_round == 0 || self.updates_per_round == 0 {
            return Err(Error::invalid("rollouts and updates per round must be positive"));
        }
        if self.eval_episodes == 0 || self.tape_capacity == 0 || self.q_trajectories == 0 {
            return Err(Error::invalid("evaluation episodes, tape capacity and Q trajectories must be positive"));
        }
        if self.ensemble.top_n == 0 || self.ensemble.top_n > self.ensemble.pool_size {
            return Err(Error::invalid("ensemble top N must lie in 1..=pool size"));
        }
        if let Some((r, e)) = self.score_reference {
            if r == e {
                return Err(Error::invalid("expert score equals random score"));
            }
        }
        self.agent.validate()
    }

    /// Evaluation period in gradient steps.
    pub fn eval_every(&self) -> u64 {
        if self.eval_interval > 0 {
            self.eval_interval
        } else {
            (self.total_steps / 20).max(1)
        }
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Canonical JSON with sorted keys.
    pub fn to_canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&sort_keys(v))?)
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<_> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Applies `dotted.key=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::invalid(format!("override `{key}`: `{part}` is not inside an object")));
        }
        let obj = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::invalid("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_json(
            "{}",
            &["agent.head_lr=0.0003".into(), "zeta=0.9".into(), "dataset=data/x.jsonl".into()],
        )
        .unwrap();
        assert_eq!(cfg.agent.head_lr, 3e-4);
        assert_eq!(cfg.zeta, 0.9);
        assert_eq!(cfg.dataset, PathBuf::from("data/x.jsonl"));
        assert!(RunConfig::from_json("{}", &["zeta".into()]).is_err());
    }

    #[test]
    fn canonical_json_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_json().unwrap();
        assert_eq!(RunConfig::from_json(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn validation_rejects_bad_zeta() {
        let cfg = RunConfig {
            zeta: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
