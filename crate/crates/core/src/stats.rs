//! Order statistics and small descriptive helpers.

use crate::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divisor n).
pub fn pop_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN in order statistic input".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(v)
}

/// Nearest-rank (inclusive) quantile: the element of rank ⌈ζ·n⌉, clamped to [1, n].
pub fn quantile_nearest_rank(xs: &[f64], zeta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::invalid(format!("quantile level {zeta} outside [0, 1]")));
    }
    let v = sorted(xs)?;
    Ok(v[nearest_rank(v.len(), zeta) - 1])
}

pub fn nearest_rank(n: usize, zeta: f64) -> usize {
    ((zeta * n as f64).ceil() as usize).clamp(1, n)
}

/// Percentile with linear interpolation between closest ranks, q in [0, 1].
pub fn percentile_linear(xs: &[f64], q: f64) -> Result<f64> {
    let v = sorted(xs)?;
    Ok(percentile_sorted(&v, q))
}

pub fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Ranks starting at 1, ties receive their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation; returns 0 when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Empirical CDF of `xs / mean(xs)` as (value, cumulative fraction) steps.
/// Equal values collapse into one step.
pub fn normalized_cdf(xs: &[f64]) -> Result<Vec<(f64, f64)>> {
    let v = sorted(xs)?;
    let m = mean(&v);
    let scale = if m > 0.0 { m } else { 1.0 };
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let p = (x / scale, (i + 1) as f64 / n);
        match out.last_mut() {
            Some(last) if last.0 == p.0 => last.1 = p.1,
            _ => out.push(p),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        let u = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_nearest_rank(&u, 1.0).unwrap(), 4.0);
        assert_eq!(quantile_nearest_rank(&u, 0.5).unwrap(), 2.0);
        assert_eq!(quantile_nearest_rank(&u, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_nearest_rank(&[7.5], 0.3).unwrap(), 7.5);
        assert!(quantile_nearest_rank(&[], 0.3).is_err());
    }

    #[test]
    fn linear_percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((percentile_linear(&v, 0.5).unwrap() - 2.5).abs() < 1e-12);
        assert!((percentile_linear(&v, 0.25).unwrap() - 1.75).abs() < 1e-12);
        assert!((percentile_linear(&v, 0.75).unwrap() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_points() {
        assert_eq!(normalized_cdf(&[1.0, 3.0]).unwrap(), vec![(0.5, 0.5), (1.5, 1.0)]);
        assert_eq!(normalized_cdf(&[2.0, 2.0, 2.0]).unwrap(), vec![(1.0, 1.0)]);
    }
}
