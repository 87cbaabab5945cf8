//! Exact two-armed Bernoulli constructions for coverage coefficients,
//! robust vs Bayes-optimal policies and the misidentification experiment,
//! plus a simulation-lemma check on small tabular MDPs.
//!
//! Arms are indexed `0 ↔ a = −1` and `1 ↔ a = +1`. A policy is the
//! probability of pulling arm `+1`.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Rng, Stream};
use crate::{Error, Result};

/// Bernoulli reward means `[p(−1), p(+1)]`.
pub type BernoulliModel = [f64; 2];

/// `m_θ`: `R(−1) = B(1/2)`, `R(+1) = B(1/2 + θε)`.
pub fn two_point_model(theta: i8, eps: f64) -> BernoulliModel {
    [0.5, 0.5 + theta as f64 * eps]
}

pub fn tv_bernoulli(p: f64, q: f64) -> f64 {
    (p - q).abs()
}

/// `num / den` with `0/0 = 0` and `x/0 = +∞`.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Numerator and denominator of `C(π, m)`.
pub fn concentrability_terms(pi: f64, m: &BernoulliModel, m_star: &BernoulliModel, beta: f64) -> (f64, f64) {
    let tv2 = [
        tv_bernoulli(m[0], m_star[0]).powi(2),
        tv_bernoulli(m[1], m_star[1]).powi(2),
    ];
    ((1.0 - pi) * tv2[0] + pi * tv2[1], (1.0 - beta) * tv2[0] + beta * tv2[1])
}

/// `C(π, m)`: squared-TV model error under the policy over that under the data.
pub fn concentrability(pi: f64, m: &BernoulliModel, m_star: &BernoulliModel, beta: f64) -> f64 {
    let (f, g) = concentrability_terms(pi, m, m_star, beta);
    ratio(f, g)
}

/// `C(π) = sup_m C(π, m)` over a model set.
pub fn robust_concentrability(pi: f64, models: &[BernoulliModel], m_star: &BernoulliModel, beta: f64) -> f64 {
    models
        .iter()
        .map(|m| concentrability(pi, m, m_star, beta))
        .fold(0.0, f64::max)
}

/// `C_Bayes(π) = E_m[f(m)] / E_m[g(m)]` under a weighted posterior.
pub fn bayes_concentrability(
    pi: f64,
    posterior: &[(f64, BernoulliModel)],
    m_star: &BernoulliModel,
    beta: f64,
) -> f64 {
    let (f, g) = posterior.iter().fold((0.0, 0.0), |(f, g), (w, m)| {
        let (fm, gm) = concentrability_terms(pi, m, m_star, beta);
        (f + w * fm, g + w * gm)
    });
    ratio(f, g)
}

/// `J(π, θ) = (1 + 2θεπ) / (2(1 − γ))` for a memoryless policy.
pub fn j_closed_form(pi: f64, theta: i8, eps: f64, gamma: f64) -> f64 {
    (1.0 + 2.0 * theta as f64 * eps * pi) / (2.0 * (1.0 - gamma))
}

/// `Σ_{t<steps} γ^t E[r_{t+1}]` by direct summation.
pub fn j_truncated(pi: f64, model: &BernoulliModel, gamma: f64, steps: usize) -> f64 {
    let r = (1.0 - pi) * model[0] + pi * model[1];
    let mut total = 0.0;
    let mut w = 1.0;
    for _ in 0..steps {
        total += w * r;
        w *= gamma;
    }
    total
}

/// Monte-Carlo discounted return of a memoryless policy.
pub fn j_monte_carlo(pi: f64, model: &BernoulliModel, gamma: f64, steps: usize, episodes: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut w = 1.0;
        for _ in 0..steps {
            let arm = usize::from(rng.random::<f64>() < pi);
            if rng.random::<f64>() < model[arm] {
                total += w;
            }
            w *= gamma;
        }
    }
    total / episodes as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicies {
    /// Ideal policy of each model, `[θ = −1, θ = +1]`.
    pub ideal: [f64; 2],
    pub robust: f64,
    /// Memoryless maximizer of the posterior-mixture return.
    pub bayes: f64,
}

/// Exact memoryless optima on `{m_{−1}, m_1}` given `w = Pr(θ = +1)`.
/// Ties go to arm `−1`.
pub fn optimal_policies(eps: f64, w: f64) -> OptimalPolicies {
    // min_θ J(π, θ) = J(π, −1) is decreasing in π for ε > 0.
    let robust = 0.0;
    // E_w[J(π, θ)] is affine in π with slope ∝ ε(2w − 1).
    let bayes = if eps * (2.0 * w - 1.0) > 0.0 { 1.0 } else { 0.0 };
    OptimalPolicies {
        ideal: [0.0, 1.0],
        robust,
        bayes,
    }
}

pub fn posterior_mixture_value(pi: f64, eps: f64, gamma: f64, w: f64) -> f64 {
    w * j_closed_form(pi, 1, eps, gamma) + (1.0 - w) * j_closed_form(pi, -1, eps, gamma)
}

/// Test-time Bayes-adaptive policy for the two-point model. The belief
/// depends only on `k = successes − failures` observed on arm `+1`; arm `−1`
/// carries no information, so choosing it once is final.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointBamdp {
    pub eps: f64,
    pub gamma: f64,
    pub prior: f64,
    /// Largest `|k|` represented; beliefs beyond are treated as settled.
    pub k_max: i64,
    /// Value of each `k ∈ [−k_max, k_max]`.
    pub values: Vec<f64>,
    /// Whether arm `+1` is pulled at each `k`.
    pub explore: Vec<bool>,
}

impl TwoPointBamdp {
    pub fn belief(&self, k: i64) -> f64 {
        belief_after(self.prior, self.eps, k)
    }

    pub fn solve(eps: f64, gamma: f64, prior: f64, k_max: i64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 0.5) || !(0.0..1.0).contains(&gamma) || !(0.0..=1.0).contains(&prior) {
            return Err(Error::invalid("need ε ∈ (0, 1/2], γ ∈ [0, 1) and a prior in [0, 1]"));
        }
        let n = (2 * k_max + 1) as usize;
        let safe = 0.5 / (1.0 - gamma);
        let mut values = vec![safe; n];
        let mut explore = vec![false; n];
        let beliefs: Vec<f64> = (-k_max..=k_max).map(|k| belief_after(prior, eps, k)).collect();
        for _ in 0..100_000 {
            let mut delta: f64 = 0.0;
            for i in 0..n {
                let w = beliefs[i];
                let p_succ = 0.5 + eps * (2.0 * w - 1.0);
                let (up, down) = if i + 1 < n && i > 0 {
                    (values[i + 1], values[i - 1])
                } else {
                    // Edge beliefs are treated as settled: commit to the better arm.
                    let settled = safe.max(p_succ / (1.0 - gamma));
                    (settled, settled)
                };
                let pull = p_succ + gamma * (p_succ * up + (1.0 - p_succ) * down);
                let v = safe.max(pull);
                explore[i] = pull > safe;
                delta = delta.max((v - values[i]).abs());
                values[i] = v;
            }
            if delta < 1e-13 {
                break;
            }
        }
        Ok(Self {
            eps,
            gamma,
            prior,
            k_max,
            values,
            explore,
        })
    }

    pub fn value(&self) -> f64 {
        self.values[self.k_max as usize]
    }

    /// Return of this policy when the true model is `θ`.
    pub fn evaluate(&self, theta: i8) -> f64 {
        let n = self.values.len();
        let safe = 0.5 / (1.0 - self.gamma);
        let p = 0.5 + theta as f64 * self.eps;
        let mut u = vec![safe; n];
        for _ in 0..100_000 {
            let mut delta: f64 = 0.0;
            for i in 0..n {
                let v = if !self.explore[i] {
                    safe
                } else if i == 0 || i + 1 == n {
                    p / (1.0 - self.gamma)
                } else {
                    p + self.gamma * (p * u[i + 1] + (1.0 - p) * u[i - 1])
                };
                delta = delta.max((v - u[i]).abs());
                u[i] = v;
            }
            if delta < 1e-13 {
                break;
            }
        }
        u[self.k_max as usize]
    }
}

/// `Pr(θ = +1)` after a net `k` successes on arm `+1`.
pub fn belief_after(prior: f64, eps: f64, k: i64) -> f64 {
    if prior <= 0.0 || prior >= 1.0 || k == 0 {
        return prior;
    }
    let lr = ((0.5 + eps) / (0.5 - eps)).ln();
    let logit = (prior / (1.0 - prior)).ln() + k as f64 * lr;
    1.0 / (1.0 + (-logit).exp())
}

/// Posterior `Pr(θ = +1 | D)` from a reward-only dataset with `n_w`
/// successes out of `n`, each drawn from `B(1/2 + βθε)`.
pub fn dataset_posterior(prior: f64, eps: f64, beta: f64, n_w: u64, n: u64) -> f64 {
    let be = beta * eps;
    let llr = (n_w as f64 - (n - n_w) as f64) * ((0.5 + be) / (0.5 - be)).ln();
    let logit = (prior / (1.0 - prior)).ln() + llr;
    1.0 / (1.0 + (-logit).exp())
}

/// `√(ln 2 / (c |D| β))` with `c = ln 2 / ln 16`.
pub fn eps_threshold(n: usize, beta: f64) -> f64 {
    let c = std::f64::consts::LN_2 / 16f64.ln();
    (std::f64::consts::LN_2 / (c * n as f64 * beta)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub beta: f64,
    pub n: usize,
    pub gamma: f64,
    pub eps: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub eps: f64,
    pub eps_threshold: f64,
    /// Error rate of the count-majority test under `θ = −1` and `θ = +1`.
    pub error_minus: f64,
    pub error_plus: f64,
    /// `max` of the two error rates.
    pub misidentification: f64,
    /// Binomial standard error of `misidentification`.
    pub sigma: f64,
    /// Mean over datasets of `J(π_bayes-DP, m₁) − J(π_robust, m₁)`.
    pub delta_dp: f64,
    /// Same with the memoryless Bayes policy.
    pub delta_memoryless: f64,
    /// Fraction of datasets with a strictly positive DP gap.
    pub delta_dp_positive: f64,
}

/// Majority test on the success count; ties are a fair coin.
pub fn majority_test(n_w: u64, n: u64, rng: &mut Rng) -> i8 {
    match (2 * n_w).cmp(&n) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => -1,
        std::cmp::Ordering::Equal => {
            if rng.random::<bool>() {
                1
            } else {
                -1
            }
        }
    }
}

/// Monte-Carlo misidentification and exact per-dataset Bayes-vs-robust gaps.
pub fn gap_experiment(cfg: &GapConfig) -> Result<Vec<GapRow>> {
    if cfg.gamma <= 0.5 || cfg.gamma >= 1.0 {
        return Err(Error::invalid("the construction needs γ ∈ (1/2, 1)"));
    }
    if !(cfg.beta > 0.0 && cfg.beta < 1.0) || cfg.n == 0 || cfg.trials == 0 {
        return Err(Error::invalid("need β ∈ (0, 1), |D| > 0 and trials > 0"));
    }
    if cfg.beta >= 1.0 / 32.0 {
        log::warn!("β = {} is outside the construction regime β < 1/32", cfg.beta);
    }
    let thr = eps_threshold(cfg.n, cfg.beta);
    cfg.eps
        .par_iter()
        .enumerate()
        .map(|(ei, &eps)| {
            if !(0.0..=0.5).contains(&eps) {
                return Err(Error::invalid(format!("ε = {eps} outside [0, 1/2]")));
            }
            let n = cfg.n as u64;
            let mut errors = [0usize; 2];
            let mut rng = stream(cfg.seed, Stream::Theory, &[ei as u64]);
            for (ti, theta) in [-1i8, 1].into_iter().enumerate() {
                let p = 0.5 + cfg.beta * theta as f64 * eps;
                let binom = Binomial::new(n, p).map_err(|e| Error::invalid(e.to_string()))?;
                for _ in 0..cfg.trials {
                    let n_w = binom.sample(&mut rng);
                    if majority_test(n_w, n, &mut rng) != theta {
                        errors[ti] += 1;
                    }
                }
            }
            let e = [
                errors[0] as f64 / cfg.trials as f64,
                errors[1] as f64 / cfg.trials as f64,
            ];
            let mis = e[0].max(e[1]);
            let (delta_dp, delta_mem, positive) = if eps > 0.0 {
                let robust = j_closed_form(optimal_policies(eps, 0.5).robust, 1, eps, cfg.gamma);
                let binom = Binomial::new(n, 0.5 + cfg.beta * eps).map_err(|e| Error::invalid(e.to_string()))?;
                let mut dp = 0.0;
                let mut mem = 0.0;
                let mut pos = 0usize;
                let gap_trials = cfg.trials.min(200);
                for _ in 0..gap_trials {
                    let n_w = binom.sample(&mut rng);
                    let w = dataset_posterior(0.5, eps, cfg.beta, n_w, n);
                    let bamdp = TwoPointBamdp::solve(eps, cfg.gamma, w, 400)?;
                    let d = bamdp.evaluate(1) - robust;
                    dp += d;
                    if d > 1e-12 {
                        pos += 1;
                    }
                    mem += j_closed_form(optimal_policies(eps, w).bayes, 1, eps, cfg.gamma) - robust;
                }
                let t = gap_trials as f64;
                (dp / t, mem / t, pos as f64 / t)
            } else {
                (0.0, 0.0, 0.0)
            };
            Ok(GapRow {
                eps,
                eps_threshold: thr,
                error_minus: e[0],
                error_plus: e[1],
                misidentification: mis,
                sigma: (mis * (1.0 - mis) / cfg.trials as f64).sqrt(),
                delta_dp,
                delta_memoryless: delta_mem,
                delta_dp_positive: positive,
            })
        })
        .collect()
}

pub fn gap_csv(rows: &[GapRow]) -> String {
    let mut s = String::from(
        "eps,eps_threshold,error_minus,error_plus,misidentification,sigma,delta_dp,delta_memoryless,delta_dp_positive\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.eps,
            r.eps_threshold,
            r.error_minus,
            r.error_plus,
            r.misidentification,
            r.sigma,
            r.delta_dp,
            r.delta_memoryless,
            r.delta_dp_positive
        ));
    }
    s
}

/// Small tabular MDP with Bernoulli rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    /// `p[s][a][s']`.
    pub p: Vec<Vec<Vec<f64>>>,
    /// `Pr(r = 1 | s, a)`.
    pub r: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
}

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

impl TabularMdp {
    pub fn random(states: usize, actions: usize, rng: &mut Rng) -> Self {
        Self {
            p: (0..states)
                .map(|_| (0..actions).map(|_| random_simplex(states, rng)).collect())
                .collect(),
            r: (0..states)
                .map(|_| (0..actions).map(|_| rng.random::<f64>()).collect())
                .collect(),
            rho: random_simplex(states, rng),
        }
    }

    pub fn states(&self) -> usize {
        self.p.len()
    }

    pub fn actions(&self) -> usize {
        self.p[0].len()
    }

    /// TV between the joint `(r, s')` distributions at `(s, a)`.
    pub fn tv(&self, other: &TabularMdp, s: usize, a: usize) -> f64 {
        let mut total = 0.0;
        for r in [0.0, 1.0] {
            let (pr, qr) = if r == 1.0 {
                (self.r[s][a], other.r[s][a])
            } else {
                (1.0 - self.r[s][a], 1.0 - other.r[s][a])
            };
            for s2 in 0..self.states() {
                total += (pr * self.p[s][a][s2] - qr * other.p[s][a][s2]).abs();
            }
        }
        0.5 * total
    }

    /// State values of a stationary policy `pi[s][a]` by fixed-point iteration.
    pub fn values(&self, pi: &[Vec<f64>], gamma: f64) -> Vec<f64> {
        let ns = self.states();
        let mut v = vec![0.0; ns];
        loop {
            let mut delta: f64 = 0.0;
            let next: Vec<f64> = (0..ns)
                .map(|s| {
                    (0..self.actions())
                        .map(|a| {
                            pi[s][a]
                                * (self.r[s][a]
                                    + gamma * (0..ns).map(|s2| self.p[s][a][s2] * v[s2]).sum::<f64>())
                        })
                        .sum()
                })
                .collect();
            for s in 0..ns {
                delta = delta.max((next[s] - v[s]).abs());
            }
            v = next;
            if delta < 1e-14 {
                return v;
            }
        }
    }

    pub fn j(&self, pi: &[Vec<f64>], gamma: f64) -> f64 {
        self.values(pi, gamma).iter().zip(&self.rho).map(|(v, r)| v * r).sum()
    }

    /// Normalized discounted occupancy `d(s, a)`.
    pub fn occupancy(&self, pi: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
        let ns = self.states();
        let mut ds = self.rho.iter().map(|r| (1.0 - gamma) * r).collect::<Vec<_>>();
        loop {
            let mut next: Vec<f64> = self.rho.iter().map(|r| (1.0 - gamma) * r).collect();
            for s in 0..ns {
                for a in 0..self.actions() {
                    for s2 in 0..ns {
                        next[s2] += gamma * ds[s] * pi[s][a] * self.p[s][a][s2];
                    }
                }
            }
            let delta = next.iter().zip(&ds).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ds = next;
            if delta < 1e-15 {
                break;
            }
        }
        (0..ns)
            .map(|s| (0..self.actions()).map(|a| ds[s] * pi[s][a]).collect())
            .collect()
    }
}

/// `(|J(π, m) − J(π, m̂)|, 2/(1 − γ)² · E_{d_m̂}[TV(m, m̂)])` with `r_max = 1`.
pub fn simulation_lemma_sides(m: &TabularMdp, m_hat: &TabularMdp, pi: &[Vec<f64>], gamma: f64) -> (f64, f64) {
    let lhs = (m.j(pi, gamma) - m_hat.j(pi, gamma)).abs();
    let d = m_hat.occupancy(pi, gamma);
    let mut e = 0.0;
    for (s, row) in d.iter().enumerate() {
        for (a, w) in row.iter().enumerate() {
            e += w * m.tv(m_hat, s, a);
        }
    }
    (lhs, 2.0 / (1.0 - gamma).powi(2) * e)
}

pub fn random_policy(states: usize, actions: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..states).map(|_| random_simplex(actions, rng)).collect()
}
