mod common;

use neubay::agent::one_hot;
use neubay::bandit::*;
use neubay::rng::{stream, Stream};
use neubay::rollout::ConstantPolicy;

#[test]
fn dataset_is_arm_zero_only() {
    let ds = make_bandit_dataset(&BanditSpec::default(), 0.95, 0).unwrap();
    assert_eq!(ds.trajectories().len(), 10);
    assert_eq!(ds.num_transitions(), 1000);
    for t in ds.trajectories() {
        assert!(t.actions.iter().all(|a| a == &one_hot(0, 2)));
        assert!(t.rewards.iter().all(|&r| r == 0.0 || r == 1.0));
    }
    let mean: f64 = ds.trajectories().iter().flat_map(|t| &t.rewards).sum::<f64>() / 1000.0;
    assert!((mean - 0.5).abs() < 0.06, "{mean}");
}

#[test]
fn skewed_ensemble_is_much_less_certain_about_the_unseen_arm() {
    for seed in 0..3 {
        let ds = make_bandit_dataset(&BanditSpec::default(), 0.95, seed).unwrap();
        let ens = RewardEnsemble::fit(&ds, &RewardEnsembleConfig::default(), seed).unwrap();
        assert!(ens.len() >= 20);
        let p = ens.posterior();
        assert!(p.ratio >= 3.0, "seed {seed}: {p:?}");
        assert_eq!(p.to_csv().lines().count(), ens.len() + 1);
    }
}

#[test]
fn bayes_adaptive_oracle_supports_the_tolerances() {
    let dp = common::bandit_bayes_dp(0.5, 100, &TEST_P1);
    let by = |p: f64| dp[TEST_P1.iter().position(|&q| q == p).unwrap()];
    assert!(by(0.99) >= 0.95, "{dp:?}");
    assert!(by(0.7) >= 0.62, "{dp:?}");
    for p in [0.01, 0.3] {
        assert!((0.40..=0.52).contains(&by(p)), "{dp:?}");
    }
    // Nothing beats knowing p1.
    for (p, v) in TEST_P1.iter().zip(&dp) {
        assert!(*v <= p.max(0.5) + 1e-12);
    }
}

#[test]
fn oracle_returns_match_known_policies() {
    // Horizon 1: the Bayes policy with a uniform prior is indifferent and
    // stays on arm 0 (ties do not pull), so it earns p0.
    let dp = common::bandit_bayes_dp(0.5, 1, &[0.1, 0.9]);
    assert_eq!(dp, vec![0.5, 0.5]);
    // With p0 = 0 arm 1 is always worth pulling.
    let dp = common::bandit_bayes_dp(0.0, 20, &[0.3]);
    assert!((dp[0] - 0.3).abs() < 1e-12);
}

#[test]
fn fixed_policies_score_their_arm_means() {
    let arm0 = ConstantPolicy(one_hot(0, 2));
    let rows = evaluate_bandit(&arm0, &TEST_P1, 20, 100, 5).unwrap();
    for r in &rows {
        // 2000 Bernoulli(1/2) draws: σ ≈ 0.0112.
        assert!((r.mean_return - 0.5).abs() < 0.045, "{r:?}");
        assert_eq!(r.arm1_rate, 0.0);
    }
    let arm1 = ConstantPolicy(one_hot(1, 2));
    let rows = evaluate_bandit(&arm1, &[0.01, 0.99], 20, 100, 5).unwrap();
    for r in &rows {
        assert!((r.mean_return - r.p1).abs() < 0.02, "{r:?}");
        assert_eq!(r.arm1_rate, 1.0);
        assert_eq!(r.early_arm1_pulls, 20.0);
    }
    assert!(evaluate_bandit(&arm1, &[0.5], 0, 100, 5).is_err());
}

#[test]
fn imagined_rewards_carry_the_penalty_but_observations_do_not() {
    let ds = make_bandit_dataset(&BanditSpec::default(), 0.95, 1).unwrap();
    let ens = RewardEnsemble::fit(&ds, &RewardEnsembleConfig::default(), 1).unwrap();
    let policy = ConstantPolicy(one_hot(1, 2));
    let lambda = 2.0;
    let mut rng = stream(1, Stream::Rollout, &[]);
    let seq = imagined_episode(&ens, 0, lambda, &policy, 30, &mut rng);
    assert_eq!(seq.num_transitions(), 30);
    let u1 = ens.uncertainty(1);
    for j in 0..30 {
        let observed = *seq.obs_row(j + 1).last().unwrap();
        assert!((0.0..=1.0).contains(&observed));
        assert!((seq.rewards[j] - (observed - lambda * u1)).abs() < 1e-12);
    }
}

#[test]
fn short_training_run_is_finite_and_deterministic() {
    let ds = make_bandit_dataset(&BanditSpec::default(), 0.95, 2).unwrap();
    let ens = RewardEnsemble::fit(&ds, &RewardEnsembleConfig::default(), 2).unwrap();
    let cfg = BanditAgentConfig {
        steps: 40,
        ..Default::default()
    };
    let (a, log) = train_bandit_agent(&ens, 0.0, &cfg, 100, 3).unwrap();
    let (b, _) = train_bandit_agent(&ens, 0.0, &cfg, 100, 3).unwrap();
    assert!(log.final_loss.is_finite() && log.mean_q.is_finite());
    assert_eq!(a.step, 40);
    let ra = evaluate_bandit(&a.policy(0.0), &[0.7], 3, 100, 9).unwrap();
    let rb = evaluate_bandit(&b.policy(0.0), &[0.7], 3, 100, 9).unwrap();
    assert_eq!(ra, rb);
    assert!(train_bandit_agent(&ens, -1.0, &cfg, 100, 3).is_err());
}

#[test]
fn figure_csv_layout() {
    let row = BanditEvalRow {
        p1: 0.3,
        mean_return: 0.5,
        std: 0.1,
        arm1_rate: 0.0,
        early_arm1_pulls: 0.0,
        late_arm1_rate: 0.0,
    };
    assert_eq!(fig3_csv(&[row], 10.0), "p1,mean_return,std,lambda\n0.3,0.5,0.1,10\n");
}
