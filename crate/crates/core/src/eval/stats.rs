//! Rank statistics, bootstrap intervals and the exact signed-rank test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Exact enumeration limit for the signed-rank null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// 1-based ranks with ties assigned their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
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

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman_rho(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 values, got {}",
            pred.len()
        )));
    }
    pearson(&average_ranks(pred), &average_ranks(target))
}

/// Percentile bootstrap interval of `stat` over `resamples` draws with
/// replacement, seeded.
pub fn bootstrap_ci<T, F>(
    data: &[T],
    stat: F,
    resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64)
where
    T: Clone,
    F: Fn(&[T]) -> f64,
{
    assert!(!data.is_empty(), "bootstrap of empty data");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(data.len());
    let mut vals: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            buf.clear();
            buf.extend((0..data.len()).map(|_| data[rng.random_range(0..data.len())].clone()));
            stat(&buf)
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (
        quantile_sorted(&vals, alpha),
        quantile_sorted(&vals, 1.0 - alpha),
    )
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Two-tailed paired Wilcoxon signed-rank p-value. Zero differences are
/// dropped; ties among |d| get average ranks. Exact null distribution for up
/// to 25 non-zero differences, normal approximation with tie correction
/// beyond.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 pairs, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&v| v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::NoSignal);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let n = d.len();
    if n <= WILCOXON_EXACT_MAX_N {
        // doubled ranks are integers even with ties
        let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = r2.iter().sum();
        let w: usize = r2
            .iter()
            .zip(&d)
            .filter(|(_, &v)| v > 0.0)
            .map(|(r, _)| r)
            .sum();
        let mut dist = vec![0f64; total + 1];
        dist[0] = 1.0;
        for &r in &r2 {
            for s in (r..=total).rev() {
                dist[s] += dist[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = dist[..=w].iter().sum::<f64>() / all;
        let upper: f64 = dist[w..].iter().sum::<f64>() / all;
        Ok((2.0 * lower.min(upper)).min(1.0))
    } else {
        let w: f64 = ranks
            .iter()
            .zip(&d)
            .filter(|(_, &v)| v > 0.0)
            .map(|(r, _)| r)
            .sum();
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
            ties += (j * j * j - j) as f64;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        Ok((2.0 * normal_sf(z)).min(1.0))
    }
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes Chebyshev fit,
/// relative error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Digamma function for positive arguments.
pub fn digamma(mut x: f64) -> f64 {
    assert!(x > 0.0, "digamma of non-positive argument");
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + x.ln()
        - 0.5 / x
        - f * (1.0 / 12.0 - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f / 132.0))))
}
