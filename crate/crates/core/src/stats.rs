//! Small statistics helpers: Welch's t-test, one-sample KS distance and
//! normalised histograms.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erf;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Least-squares slope of `ys` on `xs`. `None` when `xs` has no spread.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::NotEnoughData {
            have: a.len().min(b.len()),
            need: 2,
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se2 = va + vb;
    if se2 <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(WelchResult { t, df, p })
}

/// `sup |F_n − F|` for the empirical CDF of `samples` against `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn half_normal_cdf(x: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        erf(x / (sigma * std::f64::consts::SQRT_2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// Fraction of samples per bin; sums to 1.
    pub freqs: Vec<f64>,
}

impl Histogram {
    pub fn mode(&self) -> usize {
        self.freqs
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc })
            .0
    }
}

/// Equal-width bins over `[0, max(values)]`; an all-zero sample uses `[0, 1]`.
pub fn nonnegative_histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() || n_bins == 0 {
        return Err(Error::NotEnoughData { have: 0, need: 1 });
    }
    let hi = values.iter().copied().fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let width = hi / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let b = ((v.max(0.0) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram {
        edges: (0..=n_bins).map(|i| i as f64 * width).collect(),
        freqs: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}
