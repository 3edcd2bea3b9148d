use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// `1 - C(n-c, k) / C(n, k)` as a reduced fraction `(numerator, denominator)`.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<(BigUint, BigUint)> {
    if k == 0 || k > n {
        return Err(Error::Domain(format!("pass@k needs 1 <= k <= n (k = {k}, n = {n})")));
    }
    if c > n {
        return Err(Error::Domain(format!("{c} successes out of {n} samples")));
    }
    let den = binomial(n, k);
    let num = &den - binomial(n - c, k);
    let g = num.gcd(&den);
    if g.is_zero() {
        return Ok((num, den));
    }
    Ok((num / &g, den / g))
}

fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    let shift = den.bits().saturating_sub(960);
    let n = (num >> shift).to_f64().unwrap_or(f64::INFINITY);
    let d = (den >> shift).to_f64().unwrap_or(f64::INFINITY);
    n / d
}

/// Unbiased pass@k from `n` samples with `c` successes.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    let (num, den) = pass_at_k_exact(n, c, k)?;
    Ok(ratio_to_f64(&num, &den))
}

/// pass@k of one instance's sample outcomes.
pub fn pass_at_k_outcomes(outcomes: &[bool], k: usize) -> Result<f64> {
    let c = outcomes.iter().filter(|&&o| o).count();
    pass_at_k(outcomes.len() as u64, c as u64, k as u64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorted bootstrap means of `values`.
fn bootstrap_means<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> Vec<f64> {
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    means
}

/// Percentile bootstrap interval for the mean; deterministic given `seed`.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Domain("bootstrap of an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Domain(format!("level {level} / resamples {resamples}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("bootstrap input contains non-finite values".into()));
    }
    let means = bootstrap_means(values, resamples, &mut stream(seed, "bootstrap", 0));
    let a = (1.0 - level) / 2.0;
    Ok((quantile(&means, a), quantile(&means, 1.0 - a)))
}

/// Interval for `mean(a - b)` over paired observations.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap_ci(&diff, level, resamples, seed)
}

/// A mean with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64], resamples: usize, seed: u64) -> Result<Self> {
        let (lo, hi) = bootstrap_ci(values, 0.95, resamples, seed)?;
        Ok(Estimate {
            mean: mean(values),
            lo,
            hi,
            n: values.len(),
        })
    }

    /// Whether the interval lies strictly above zero.
    pub fn excludes_zero_above(&self) -> bool {
        self.lo > 0.0
    }

    /// Whether the interval lies strictly below zero.
    pub fn excludes_zero_below(&self) -> bool {
        self.hi < 0.0
    }
}
