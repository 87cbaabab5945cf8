//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Finite-horizon value iteration for PointLine on a state grid with linear
/// interpolation, a 201-point action grid and 9-node Gauss–Hermite noise.
/// Returns the undiscounted optimal return from `s_0 = 0`.
pub fn pointline_dp(horizon: usize) -> f64 {
    let (lo, hi, n) = (-1.0f64, 3.0f64, 1601usize);
    let dx = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    // Probabilists' Gauss–Hermite nodes and weights for N(0, 1), 9 points.
    let nodes = [
        -4.512_745_863_399_783,
        -3.205_429_002_856_470,
        -2.076_847_978_677_830,
        -1.023_255_663_789_133,
        0.0,
        1.023_255_663_789_133,
        2.076_847_978_677_830,
        3.205_429_002_856_470,
        4.512_745_863_399_783,
    ];
    let weights = [
        2.234_584_400_774_658e-5,
        2.789_141_321_231_769e-3,
        4.991_640_676_521_786e-2,
        2.440_975_028_949_395e-1,
        4.063_492_063_492_064e-1,
        2.440_975_028_949_395e-1,
        4.991_640_676_521_786e-2,
        2.789_141_321_231_769e-3,
        2.234_584_400_774_658e-5,
    ];
    let sd = 0.01;
    let interp = |v: &[f64], x: f64| -> f64 {
        let f = ((x - lo) / dx).clamp(0.0, (n - 1) as f64 - 1e-9);
        let i = f.floor() as usize;
        let w = f - i as f64;
        v[i] * (1.0 - w) + v[i + 1] * w
    };
    let actions: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 * 0.01).collect();
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        let next: Vec<f64> = grid
            .iter()
            .map(|&s| {
                actions
                    .iter()
                    .map(|&a| {
                        nodes
                            .iter()
                            .zip(&weights)
                            .map(|(z, w)| {
                                let s2 = s + 0.1 * a + sd * z;
                                w * (-(s2 - 1.0).abs() + interp(&v, s2))
                            })
                            .sum::<f64>()
                    })
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        v = next;
    }
    interp(&v, 0.0)
}

/// Bayes-adaptive DP for a two-armed Bernoulli bandit with a known arm 0
/// (`p0`) and a Beta(1, 1) prior on arm 1, horizon `t`. States are success
/// and failure counts on arm 1. Returns, per `p1`, the exact expected
/// normalized return of the Bayes-optimal policy when arm 1 pays `p1`.
pub fn bandit_bayes_dp(p0: f64, horizon: usize, p1_values: &[f64]) -> Vec<f64> {
    let t = horizon;
    // pull[k][a][b]: whether the optimal policy pulls arm 1 with k steps left.
    let mut v_next = vec![vec![0.0; t + 2]; t + 2];
    let mut pull = vec![vec![vec![false; t + 1]; t + 1]; t + 1];
    for k in 1..=t {
        let used = t - k;
        let mut v = vec![vec![0.0; t + 2]; t + 2];
        for a in 0..=used {
            for b in 0..=used - a {
                let mu = (a as f64 + 1.0) / (a + b + 2) as f64;
                let stay = p0 + v_next[a][b];
                let go = mu * (1.0 + v_next[a + 1][b]) + (1.0 - mu) * v_next[a][b + 1];
                pull[k][a][b] = go > stay;
                v[a][b] = stay.max(go);
            }
        }
        v_next = v;
    }
    p1_values
        .iter()
        .map(|&p1| {
            let mut w_next = vec![vec![0.0; t + 2]; t + 2];
            for k in 1..=t {
                let used = t - k;
                let mut w = vec![vec![0.0; t + 2]; t + 2];
                for a in 0..=used {
                    for b in 0..=used - a {
                        w[a][b] = if pull[k][a][b] {
                            p1 * (1.0 + w_next[a + 1][b]) + (1.0 - p1) * w_next[a][b + 1]
                        } else {
                            p0 + w_next[a][b]
                        };
                    }
                }
                w_next = w;
            }
            w_next[0][0] / t as f64
        })
        .collect()
}

use neubay::env::pointline::{generate_dataset, PointLine};
use neubay::env::{BehaviorPolicy, OfflineDataset};
use neubay::rng::{stream, Stream};
use neubay::world::{EnsembleConfig, WorldEnsemble};

pub fn pointline_data(behavior: BehaviorPolicy, n: usize, horizon: usize, seed: u64) -> OfflineDataset {
    let mut rng = stream(seed, Stream::Data, &[horizon as u64]);
    generate_dataset(&PointLine::new(horizon), behavior, n, 0.99, &mut rng).unwrap()
}

/// A quick ensemble for tests that only need a plausible model.
pub fn small_world(ds: &OfflineDataset, layer_norm: bool, seed: u64) -> WorldEnsemble {
    let mut cfg = EnsembleConfig {
        pool_size: 4,
        top_n: 3,
        ..Default::default()
    };
    cfg.model.width = 16;
    cfg.model.hidden_layers = 2;
    cfg.model.layer_norm = layer_norm;
    cfg.train.max_epochs = 30;
    WorldEnsemble::train(ds, &cfg, seed).unwrap()
}
