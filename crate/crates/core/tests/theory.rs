use neubay::rng::{stream, Stream};
use neubay::theory::*;
use proptest::prelude::*;

#[test]
fn exact_model_has_zero_coefficient() {
    let m = [0.5, 0.7];
    assert_eq!(concentrability(0.3, &m, &m, 0.1), 0.0);
}

#[test]
fn unseen_arm_error_is_infinite() {
    let m_star = [0.5, 0.5];
    let wrong_on_arm1 = [0.5, 0.9];
    assert_eq!(concentrability(0.2, &wrong_on_arm1, &m_star, 0.0), f64::INFINITY);
}

#[test]
fn errors_on_both_arms_give_the_closed_form_ratio() {
    let m_star = [0.5, 0.5];
    let m = [0.6, 0.8];
    // ((1 − π)·0.01 + π·0.09) / ((1 − β)·0.01 + β·0.09) with π = 0.5, β = 0.25.
    let expected = (0.5 * 0.01 + 0.5 * 0.09) / (0.75 * 0.01 + 0.25 * 0.09);
    assert!((concentrability(0.5, &m, &m_star, 0.25) - expected).abs() < 1e-12);
}

#[test]
fn point_mass_posterior_matches_single_model() {
    let m_star = [0.4, 0.55];
    let m = [0.45, 0.7];
    let a = bayes_concentrability(0.6, &[(1.0, m)], &m_star, 0.2);
    assert!((a - concentrability(0.6, &m, &m_star, 0.2)).abs() < 1e-12);
}

#[test]
fn mixture_can_be_finite_while_supremum_is_not() {
    let m_star = [0.5, 0.5];
    let m1 = [0.6, 0.6];
    let m2 = [0.5, 0.9];
    let beta = 0.0;
    assert_eq!(robust_concentrability(0.5, &[m1, m2], &m_star, beta), f64::INFINITY);
    let c = bayes_concentrability(0.5, &[(0.5, m1), (0.5, m2)], &m_star, beta);
    assert!(c.is_finite() && c > 0.0);
}

#[test]
fn policies_of_the_two_point_construction() {
    let p = optimal_policies(0.1, 0.9);
    assert_eq!(p.ideal, [0.0, 1.0]);
    assert_eq!(p.robust, 0.0);
    assert_eq!(p.bayes, 1.0);
    // Uniform posterior: every memoryless policy is worth 1/(2(1 − γ)).
    let gamma = 0.9;
    for pi in [0.0, 0.3, 1.0] {
        assert!((posterior_mixture_value(pi, 0.2, gamma, 0.5) - 5.0).abs() < 1e-12);
    }
    assert_eq!(optimal_policies(0.2, 0.5).bayes, 0.0);
    assert_eq!(optimal_policies(0.2, 0.2).bayes, 0.0);
}

#[test]
fn closed_form_value_matches_summation_and_simulation() {
    let gamma = 0.9;
    let eps = 0.2;
    let mut rng = stream(3, Stream::Theory, &[]);
    for theta in [-1i8, 1] {
        for pi in [0.0, 0.25, 1.0] {
            let cf = j_closed_form(pi, theta, eps, gamma);
            let model = two_point_model(theta, eps);
            let sum = j_truncated(pi, &model, gamma, 100_000);
            assert!((cf - sum).abs() < 1e-9, "{cf} vs {sum}");
            let mc = j_monte_carlo(pi, &model, gamma, 200, 4000, &mut rng);
            // Per-episode std is below 1/(1 − γ²)^{1/2} ≈ 2.3.
            assert!((cf - mc).abs() < 5.0 * 2.3 / 4000f64.sqrt(), "{cf} vs {mc}");
        }
    }
}

#[test]
fn indistinguishable_models_are_a_coin_flip() {
    let rows = gap_experiment(&GapConfig {
        beta: 0.01,
        n: 1000,
        gamma: 0.9,
        eps: vec![0.0],
        trials: 4000,
        seed: 1,
    })
    .unwrap();
    let r = rows[0];
    assert!((r.error_minus - 0.5).abs() < 0.05 && (r.error_plus - 0.5).abs() < 0.05, "{r:?}");
}

#[test]
fn large_gap_with_many_samples_is_identified() {
    let rows = gap_experiment(&GapConfig {
        beta: 0.1,
        n: 10_000,
        gamma: 0.9,
        eps: vec![0.4],
        trials: 2000,
        seed: 2,
    })
    .unwrap();
    assert!(rows[0].misidentification < 0.01, "{:?}", rows[0]);
}

#[test]
fn small_gap_regime_keeps_the_test_unreliable_and_bayes_ahead() {
    let beta = 0.01;
    let n = 1000;
    let thr = eps_threshold(n, beta).min(0.5);
    let rows = gap_experiment(&GapConfig {
        beta,
        n,
        gamma: 0.9,
        eps: vec![thr * 0.5, thr],
        trials: 2000,
        seed: 3,
    })
    .unwrap();
    for r in &rows {
        assert!(r.misidentification >= 0.125 - 3.0 * r.sigma, "{r:?}");
        assert!(r.delta_dp > 0.0, "{r:?}");
    }
}

#[test]
fn regime_threshold_value() {
    // ln2 / c = ln16, so the threshold is √(ln16 / (|D|β)) ≈ 0.5266 here.
    assert!((eps_threshold(1000, 0.01) - (16f64.ln() / 10.0).sqrt()).abs() < 1e-12);
    assert!((eps_threshold(1000, 0.01) - 0.526_553_769_5).abs() < 1e-9);
}

#[test]
fn bamdp_dominates_memoryless_policies() {
    let gamma = 0.9;
    for &(eps, prior) in &[(0.1, 0.5), (0.2, 0.3), (0.3, 0.7)] {
        let dp = TwoPointBamdp::solve(eps, gamma, prior, 300).unwrap();
        let best_memoryless = [0.0, 1.0]
            .iter()
            .map(|&pi| posterior_mixture_value(pi, eps, gamma, prior))
            .fold(f64::MIN, f64::max);
        assert!(dp.value() >= best_memoryless - 1e-9);
        // Its value is the posterior mixture of its per-model returns.
        let mix = prior * dp.evaluate(1) + (1.0 - prior) * dp.evaluate(-1);
        assert!((mix - dp.value()).abs() < 1e-8, "{mix} vs {}", dp.value());
    }
}

#[test]
fn belief_updates_follow_the_likelihood_ratio() {
    let eps = 0.2;
    let w = belief_after(0.5, eps, 1);
    assert!((w - 0.7).abs() < 1e-12);
    assert!((belief_after(0.5, eps, -1) - 0.3).abs() < 1e-12);
    assert!((belief_after(0.5, eps, 0) - 0.5).abs() < 1e-12);
}

#[test]
fn gap_experiment_rejects_bad_discount() {
    let cfg = GapConfig {
        beta: 0.01,
        n: 10,
        gamma: 0.4,
        eps: vec![0.1],
        trials: 10,
        seed: 0,
    };
    assert!(gap_experiment(&cfg).is_err());
}

#[test]
fn simulation_lemma_on_random_small_mdps() {
    let mut rng = stream(9, Stream::Theory, &[]);
    for _ in 0..200 {
        let m = TabularMdp::random(3, 2, &mut rng);
        let m_hat = TabularMdp::random(3, 2, &mut rng);
        let pi = random_policy(3, 2, &mut rng);
        let (lhs, rhs) = simulation_lemma_sides(&m, &m_hat, &pi, 0.8);
        assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
    }
}

#[test]
fn occupancy_is_a_distribution() {
    let mut rng = stream(10, Stream::Theory, &[]);
    let m = TabularMdp::random(3, 2, &mut rng);
    let pi = random_policy(3, 2, &mut rng);
    let d = m.occupancy(&pi, 0.9);
    let total: f64 = d.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-10);
}

fn bernoulli() -> impl Strategy<Value = [f64; 2]> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| [a, b])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bayes_coefficient_is_at_most_the_supremum(
        m_star in bernoulli(),
        models in proptest::collection::vec((0.01f64..1.0, bernoulli()), 1..6),
        pi in 0.0f64..=1.0,
        beta in 0.0f64..=1.0,
    ) {
        let total: f64 = models.iter().map(|(w, _)| w).sum();
        let posterior: Vec<(f64, [f64; 2])> = models.iter().map(|(w, m)| (w / total, *m)).collect();
        let support: Vec<[f64; 2]> = models.iter().map(|(_, m)| *m).collect();
        let bayes = bayes_concentrability(pi, &posterior, &m_star, beta);
        let sup = robust_concentrability(pi, &support, &m_star, beta);
        prop_assert!(bayes <= sup * (1.0 + 1e-12) + 1e-12, "{} > {}", bayes, sup);
    }

    #[test]
    fn coefficient_is_nonnegative(m in bernoulli(), m_star in bernoulli(), pi in 0.0f64..=1.0, beta in 0.0f64..=1.0) {
        prop_assert!(concentrability(pi, &m, &m_star, beta) >= 0.0);
    }
}
