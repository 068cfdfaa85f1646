//! Rank statistics and bootstrap intervals.

use serde::Serialize;
use statrs::function::erf::erfc;

use super::{MatchError, Result};
use crate::scalar::Scalar;
use crate::seeding::{KeyPart, KeyedRng};

/// Two-sided Mann–Whitney U test result.
///
/// `u` counts pairs where the second sample exceeds the first, ties
/// counting one half. The p-value uses the tie-corrected normal
/// approximation without continuity correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney<T> {
    pub u: T,
    pub z: T,
    pub p_value: T,
}

/// Average (mid) ranks, 1-based.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney U test of `first` against `second`.
pub fn mann_whitney<T: Scalar>(first: &[T], second: &[T]) -> Result<MannWhitney<T>> {
    if first.is_empty() || second.is_empty() {
        return Err(MatchError::EmptySample);
    }
    if first.iter().chain(second).any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    let n1 = first.len() as f64;
    let n2 = second.len() as f64;
    let pooled: Vec<T> = first.iter().chain(second).copied().collect();
    let ranks = average_ranks(&pooled);
    let r2: f64 = ranks[first.len()..].iter().sum();
    let u = r2 - n2 * (n2 + 1.0) / 2.0;

    let n = n1 + n2;
    let mut sorted: Vec<T> = pooled;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_sum += t * t * t - t;
        i = j;
    }
    let variance = if n > 1.0 {
        n1 * n2 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)))
    } else {
        0.0
    };
    let (z, p) = if variance <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = (u - n1 * n2 / 2.0) / variance.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    };
    Ok(MannWhitney {
        u: T::of(u),
        z: T::of(z),
        p_value: T::of(p),
    })
}

pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().copied().sum::<T>() / T::of_usize(values.len()))
}

/// Percentile bootstrap interval for `mean(second) - mean(first)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bootstrap {
    pub resamples: usize,
    pub level: f64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            level: 0.95,
        }
    }
}

impl Bootstrap {
    pub fn interval<T: Scalar>(&self, first: &[T], second: &[T], key: &[KeyPart<'_>]) -> Result<(T, T)> {
        if first.is_empty() || second.is_empty() {
            return Err(MatchError::EmptySample);
        }
        if self.resamples == 0 {
            return Err(MatchError::Config("bootstrap needs at least one resample".into()));
        }
        let a: Vec<f64> = first.iter().map(|v| v.to_f64_lossy()).collect();
        let b: Vec<f64> = second.iter().map(|v| v.to_f64_lossy()).collect();
        let mut rng = KeyedRng::new("bootstrap", key);
        let mut draws: Vec<f64> = (0..self.resamples)
            .map(|_| {
                let ma = resampled_mean(&a, &mut rng);
                let mb = resampled_mean(&b, &mut rng);
                mb - ma
            })
            .collect();
        draws.sort_by(|x, y| x.partial_cmp(y).expect("finite draws"));
        let tail = (1.0 - self.level) / 2.0;
        Ok((T::of(quantile(&draws, tail)), T::of(quantile(&draws, 1.0 - tail))))
    }
}

fn resampled_mean(values: &[f64], rng: &mut KeyedRng) -> f64 {
    let n = values.len() as u64;
    let sum: f64 = (0..n).map(|_| values[rng.below(n) as usize]).sum();
    sum / n as f64
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
