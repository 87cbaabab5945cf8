mod common;

use neubay::env::{BehaviorPolicy, NeverTerminal};
use neubay::rollout::*;
use neubay::world::{threshold_from_values, UncertaintyThreshold};

fn check_invariants(round: &[ImaginedTrajectory], spec: &RolloutSpec) {
    for r in round {
        let n = r.imagined_len();
        assert_eq!(r.step_models.len(), n);
        assert!(r.step_models.iter().all(|&m| m == r.model_index));
        if n == 0 {
            assert_eq!(r.stop, StopReason::UncertaintyTruncation);
            continue;
        }
        for (j, f) in r.flags.iter().enumerate() {
            if j + 1 < n {
                assert_eq!(f.count(), 0, "flag before the last step");
                assert!(r.uncertainties[j] <= spec.threshold.value);
            } else {
                assert_eq!(f.count(), 1, "exactly one stop reason");
                assert!(!(f.timeout && f.terminal));
            }
        }
        assert!(r.history.t + n <= spec.horizon);
        if r.stop == StopReason::Timeout {
            assert_eq!(r.history.t + n, spec.horizon);
        }
    }
}

#[test]
fn rollouts_respect_the_stopping_rules() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 30, 30, 7);
    let world = common::small_world(&ds, true, 7);
    for zeta in [0.5, 0.9, 1.0] {
        for keep in [true, false] {
            let spec = RolloutSpec {
                k: 50,
                threshold: world.quantile_threshold(&ds, zeta).unwrap(),
                horizon: ds.max_len(),
                penalty: 0.0,
                keep_truncated_step: keep,
            };
            let policy = UniformPolicy { action_dim: 1 };
            for round in 0..4 {
                let r = rollout_round(&ds, &world, &NeverTerminal, &policy, &spec, 1, round).unwrap();
                assert_eq!(r.len(), 50);
                check_invariants(&r, &spec);
                if !keep {
                    assert!(r.iter().flat_map(|x| &x.uncertainties).all(|&u| u <= spec.threshold.value));
                }
            }
        }
    }
}

#[test]
fn without_a_threshold_every_rollout_times_out() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 10, 25, 8);
    let world = common::small_world(&ds, true, 8);
    let spec = RolloutSpec {
        k: 20,
        threshold: UncertaintyThreshold::infinite(),
        horizon: 25,
        penalty: 0.0,
        keep_truncated_step: true,
    };
    let r = rollout_round(&ds, &world, &NeverTerminal, &ConstantPolicy(vec![0.3]), &spec, 2, 0).unwrap();
    for x in &r {
        assert_eq!(x.stop, StopReason::Timeout);
        assert_eq!(x.history.t + x.imagined_len(), 25);
        assert!(x.actions.iter().all(|a| a == &vec![0.3]));
    }
    let again = rollout_round(&ds, &world, &NeverTerminal, &ConstantPolicy(vec![0.3]), &spec, 2, 0).unwrap();
    assert_eq!(r, again);
}

#[test]
fn terminal_function_ends_rollouts() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 10, 25, 9);
    let world = common::small_world(&ds, true, 9);
    let spec = RolloutSpec {
        k: 20,
        threshold: UncertaintyThreshold::infinite(),
        horizon: 25,
        penalty: 0.0,
        keep_truncated_step: true,
    };
    let always = |_: &[f64], _: &[f64], _: &[f64]| true;
    let r = rollout_round(&ds, &world, &always, &UniformPolicy { action_dim: 1 }, &spec, 3, 0).unwrap();
    for x in &r {
        assert_eq!(x.stop, StopReason::Terminal);
        assert_eq!(x.imagined_len(), 1);
        assert!(x.flags[0].terminal && !x.flags[0].timeout);
    }
}

#[test]
fn penalty_lowers_rewards_by_scaled_uncertainty() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 10, 25, 10);
    let world = common::small_world(&ds, true, 10);
    let th = world.quantile_threshold(&ds, 1.0).unwrap();
    let mut spec = RolloutSpec {
        k: 5,
        threshold: UncertaintyThreshold { value: f64::INFINITY, ..th },
        horizon: 25,
        penalty: 0.0,
        keep_truncated_step: true,
    };
    let policy = ConstantPolicy(vec![1.0]);
    let plain = rollout_round(&ds, &world, &NeverTerminal, &policy, &spec, 4, 0).unwrap();
    spec.penalty = 0.5;
    let pen = rollout_round(&ds, &world, &NeverTerminal, &policy, &spec, 4, 0).unwrap();
    for (a, b) in plain.iter().zip(&pen) {
        for j in 0..a.imagined_len() {
            let expected = a.rewards[j] - 0.5 * a.uncertainties[j] / th.dataset_mean;
            assert!((b.rewards[j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn threshold_keeps_nearest_rank_semantics() {
    let t = threshold_from_values(&[3.0, 1.0, 2.0, 4.0], 0.5).unwrap();
    assert_eq!(t.value, 2.0);
    assert!((t.dataset_mean - 2.5).abs() < 1e-12);
}
