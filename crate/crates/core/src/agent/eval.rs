use serde::{Deserialize, Serialize};

use crate::env::{history_obs, Environment};
use crate::rng::Rng;
use crate::rollout::RolloutPolicy;
use crate::stats::{mean, pop_std};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub discounted: Vec<f64>,
    pub lengths: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation across episodes.
    pub std: f64,
    pub discounted_mean: f64,
}

/// Runs `episodes` online episodes, feeding the policy its history one
/// entry at a time. `returns` are undiscounted sums; `discounted` uses `gamma`.
pub fn evaluate<P: RolloutPolicy, E: Environment>(
    policy: &P,
    env: &mut E,
    episodes: usize,
    gamma: f64,
    rng: &mut Rng,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let ad = env.action_dim();
    let mut returns = Vec::with_capacity(episodes);
    let mut discounted = Vec::with_capacity(episodes);
    let mut lengths = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = policy.start();
        let s0 = env.reset(rng);
        policy.observe(&mut state, &history_obs(&s0, None, 0.0, ad));
        let mut total = 0.0;
        let mut disc = 0.0;
        let mut weight = 1.0;
        let mut len = 0;
        loop {
            let a = policy.act(&state, rng);
            let step = env.step(&a, rng)?;
            if !step.reward.is_finite() {
                return Err(Error::NonFinite(format!("reward at evaluation step {len}")));
            }
            total += step.reward;
            disc += weight * step.reward;
            weight *= gamma;
            len += 1;
            if step.terminal || step.truncated {
                break;
            }
            policy.observe(&mut state, &history_obs(&step.next_state, Some(&a), step.reward, ad));
        }
        returns.push(total);
        discounted.push(disc);
        lengths.push(len);
    }
    Ok(EvalReport {
        mean: mean(&returns),
        std: pop_std(&returns),
        discounted_mean: mean(&discounted),
        returns,
        discounted,
        lengths,
    })
}
