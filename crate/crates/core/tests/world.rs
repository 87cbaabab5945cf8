mod common;

use neubay::env::BehaviorPolicy;
use neubay::world::{threshold_from_values, WorldEnsemble};
use proptest::prelude::*;

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 20, 30, 3);
    let world = common::small_world(&ds, true, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.ckpt");
    world.save(&p).unwrap();
    let back = WorldEnsemble::load(&p).unwrap();
    assert_eq!(back.fingerprint(), world.fingerprint());
    for (s, a) in [(0.0, 0.5), (0.7, -1.0), (2.0, 1.0)] {
        assert_eq!(world.predict(1, &[s], &[a]).unwrap(), back.predict(1, &[s], &[a]).unwrap());
        assert_eq!(world.uncertainty(&[s], &[a]).unwrap(), back.uncertainty(&[s], &[a]).unwrap());
    }
    let text = std::fs::read(&p).unwrap();
    std::fs::write(&p, &text[..text.len() / 2]).unwrap();
    assert!(WorldEnsemble::load(&p).is_err());
}

#[test]
fn dataset_threshold_at_one_is_the_largest_dataset_uncertainty() {
    let ds = common::pointline_data(BehaviorPolicy::medium(), 20, 30, 4);
    let world = common::small_world(&ds, true, 4);
    let us = world.dataset_uncertainties(&ds);
    assert_eq!(us.len(), ds.num_transitions());
    let max = us.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(world.quantile_threshold(&ds, 1.0).unwrap().value, max);
    let cdf = world.empirical_cdf(&ds).unwrap();
    assert_eq!(cdf.last().unwrap().1, 1.0);
    assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
}

#[test]
fn predictions_reject_wrong_shapes_and_non_finite_inputs() {
    let ds = common::pointline_data(BehaviorPolicy::Random, 10, 20, 5);
    let world = common::small_world(&ds, false, 5);
    assert!(world.predict(0, &[0.0, 1.0], &[0.0]).is_err());
    assert!(world.predict(0, &[f64::NAN], &[0.0]).is_err());
    assert!(world.query(0, &[0.0], &[f64::INFINITY]).is_err());
}

#[test]
fn layer_norm_step_bound_covers_single_steps() {
    let ds = common::pointline_data(BehaviorPolicy::Random, 20, 30, 6);
    let world = common::small_world(&ds, true, 6);
    for m in 0..world.len() {
        let bound = world.ln_step_bound(m);
        for i in 0..200 {
            let s = -50.0 + i as f64 * 0.5;
            let a = ((i * 7) % 21) as f64 / 10.0 - 1.0;
            let p = world.predict(m, &[s], &[a]).unwrap();
            assert!((p.next_state_mean[0] - s).abs() <= bound, "member {m} at s = {s}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quantile_threshold_is_exact_and_monotone(
        values in proptest::collection::vec(0.0f64..100.0, 1..200),
        z1 in 0.0f64..=1.0,
        z2 in 0.0f64..=1.0,
    ) {
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(threshold_from_values(&values, 1.0).unwrap().value, max);
        let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
        let a = threshold_from_values(&values, lo).unwrap().value;
        let b = threshold_from_values(&values, hi).unwrap().value;
        prop_assert!(a <= b);
        prop_assert!(values.contains(&a));
    }
}
