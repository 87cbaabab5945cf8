mod common;

use neubay::diagnostics::*;
use neubay::env::BehaviorPolicy;
use neubay::trainer::MetricsRecord;
use proptest::prelude::*;

#[test]
fn forward_fill_examples() {
    let s = [None, Some(1.0), None, Some(3.0), None, None];
    assert_eq!(
        forward_fill(&s),
        vec![None, Some(1.0), Some(1.0), Some(3.0), Some(3.0), Some(3.0)]
    );
    assert_eq!(forward_fill(&[]), Vec::<Option<f64>>::new());
}

#[test]
fn bound_without_td_error_is_pure_discount() {
    let b = backup_bound(0.9, &[0.0; 10], 1.0).unwrap();
    assert!((b - 0.9f64.powi(10)).abs() < 1e-12);
    assert!((b - 0.348_678_440_1).abs() < 1e-10);
    let far = backup_bound(0.9, &vec![0.0; 500], 1.0).unwrap();
    assert!(far < 1e-20);
    assert!(backup_bound(1.0, &[0.0], 1.0).is_err());
    assert!(backup_bound(0.9, &[], 1.0).is_err());
}

#[test]
fn bound_weights_td_errors_by_distance() {
    // 0.1 + 0.5·0.2 + 0.25·0.4 + 0.125·2
    let b = backup_bound(0.5, &[0.1, 0.2, 0.4], 2.0).unwrap();
    assert!((b - 0.55).abs() < 1e-12);
}

#[test]
fn chain_values_match_long_summation() {
    let chain = ChainMdp {
        rewards: vec![1.0, -0.5, 0.25],
        gamma: 0.9,
    };
    for s in 0..3 {
        let direct: f64 = (0..2000).map(|k| 0.9f64.powi(k) * chain.rewards[(s + k as usize) % 3]).sum();
        assert!((chain.q(s) - direct).abs() < 1e-9);
    }
    assert!(chain.realized_error(1, &[0.0; 7], 0.0) < 1e-12);
    let e = chain.realized_error(0, &[0.0; 4], 1.0);
    assert!((e - 0.9f64.powi(4)).abs() < 1e-12);
}

#[test]
fn realized_backup_error_never_exceeds_the_bound() {
    let rows = backup_bound_grid(&[0.9, 0.99], 50, &[0.0, 0.01, 0.1], &[0.0, 1.0, 5.0], 5, 7).unwrap();
    assert_eq!(rows.len(), 2 * 50 * 3 * 3);
    assert!(rows.iter().all(|r| r.violations == 0));
    // The all-same-sign case attains the bound.
    assert!(rows.iter().all(|r| (r.realized_max - r.bound).abs() <= 1e-9 * (1.0 + r.bound)));
}

#[test]
fn overestimation_series_are_aligned() {
    let rec = |step: u64, q: f64, j: f64| MetricsRecord {
        step,
        round: step,
        updates: 0,
        skipped: 0,
        critic_loss: f64::NAN,
        actor_loss: f64::NAN,
        alpha: 1.0,
        entropy: 0.0,
        batch_q: 0.0,
        dataset_q: q,
        eval_return: 0.0,
        eval_std: 0.0,
        eval_discounted: j,
        normalized_score: f64::NAN,
        horizons: None,
    };
    let pts = overestimation_track(&[rec(0, 0.3, -2.0), rec(100, -1.0, -2.0), rec(200, f64::NAN, -1.0)]);
    assert_eq!(pts.len(), 2);
    assert_eq!((pts[0].step, pts[1].step), (0, 100));
    assert!((pts[0].ratio - 1.15).abs() < 1e-12);
    assert!((pts[1].ratio - 0.5).abs() < 1e-12);
    assert!(overestimation_csv(&pts).lines().count() == 3);
}

#[test]
fn open_loop_study_on_a_small_model() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 60, 50, 1);
    let world = common::small_world(&ds, true, 1);
    let report = open_loop_eval(&world, &ds, 40, 50, 3).unwrap();
    assert_eq!(report.state_rmse.len(), 50);
    assert_eq!(report.scatter.len(), 40 * 50);
    assert!((-1.0..=1.0).contains(&report.spearman));
    for b in report.state_rmse.iter().chain(&report.state_rms).chain(&report.reward_bias) {
        assert!(b.lo <= b.median && b.median <= b.hi, "{b:?}");
    }
    // One step from a real state stays near the aleatoric floor.
    assert!(report.state_rmse[0].median < 0.05, "{:?}", report.state_rmse[0]);
    assert!(report.bands_csv().lines().count() == 51);
    let p95 = report.rmse_percentile_at(50, 0.95).unwrap();
    assert!((p95 - report.state_rmse[49].hi).abs() < 1e-12);
    assert!(report.rmse_percentile_at(51, 0.5).is_err());
}

#[test]
fn layer_norm_growth_bound_holds_on_a_small_model() {
    let ds = common::pointline_data(BehaviorPolicy::Random, 40, 50, 2);
    let world = common::small_world(&ds, true, 2);
    let check = ln_growth_check(&world, &ds, 60, 300, 4).unwrap();
    assert_eq!(check.checks, 60 * 300);
    assert_eq!(check.violations, 0, "{check:?}");
    assert!(check.max_ratio <= 1.0);
    let plain = common::small_world(&ds, false, 2);
    assert!(ln_growth_check(&plain, &ds, 10, 10, 4).is_err());
}

proptest! {
    #[test]
    fn forward_fill_keeps_the_observed_prefix(raw in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 0..40)) {
        let filled = forward_fill(&raw);
        let first_gap = raw.iter().position(|v| v.is_none()).unwrap_or(raw.len());
        prop_assert_eq!(&filled[..first_gap], &raw[..first_gap]);
        for (i, v) in raw.iter().enumerate() {
            if v.is_some() {
                prop_assert_eq!(filled[i], *v);
            }
        }
    }

    #[test]
    fn bands_contain_their_median(rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..30)) {
        for b in bands(&rows).unwrap() {
            prop_assert!(b.lo <= b.median && b.median <= b.hi);
        }
    }

    #[test]
    fn backup_bound_dominates_random_errors(
        gamma in 0.05f64..0.995,
        h in 1usize..60,
        delta in 0.0f64..1.0,
        eps in 0.0f64..10.0,
        seed in 0u64..1000,
    ) {
        let rows = backup_bound_grid(&[gamma], h, &[delta], &[eps], 2, seed).unwrap();
        prop_assert!(rows.iter().all(|r| r.violations == 0));
    }
}
