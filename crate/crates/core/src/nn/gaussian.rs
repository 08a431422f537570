//! Tanh-squashed diagonal Gaussian policy head.
//!
//! `raw = mean + exp(log_std)·ε`, `squashed = tanh(raw)`. Log-densities are
//! of the squashed action in `(−1, 1)^A` and include the change-of-variables
//! term `−Σ log(1 − tanh²(raw))`.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Sample,
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct HeadSample {
    pub raw: Array2<f64>,
    pub squashed: Array2<f64>,
    pub log_prob: Array1<f64>,
    /// Standard-normal noise used for the draw (zeros in deterministic mode).
    pub noise: Array2<f64>,
    /// Log-std after clamping.
    pub log_std: Array2<f64>,
    /// True where the incoming log-std was inside the clamp range.
    pub log_std_free: Array2<bool>,
}

/// `ln(1 − tanh²(u))` without cancellation for large `|u|`.
pub fn log1m_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    2.0 * (std::f64::consts::LN_2 - a - softplus(-2.0 * a))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn gaussian_head<R: Rng + ?Sized>(
    mean: ArrayView2<f64>,
    log_std: ArrayView2<f64>,
    rng: &mut R,
    mode: HeadMode,
) -> HeadSample {
    let noise = match mode {
        HeadMode::Sample => Array2::from_shape_fn(mean.raw_dim(), |_| rng.sample(StandardNormal)),
        HeadMode::Deterministic => Array2::zeros(mean.raw_dim()),
    };
    head_with_noise(mean, log_std, noise)
}

/// Evaluate the head with externally supplied noise (used for frozen-noise
/// gradient checks and by `gaussian_head`).
pub fn head_with_noise(
    mean: ArrayView2<f64>,
    log_std: ArrayView2<f64>,
    noise: Array2<f64>,
) -> HeadSample {
    let log_std_free = log_std.mapv(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(&l));
    let ls = log_std.mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let mut raw = Array2::zeros(mean.raw_dim());
    Zip::from(&mut raw)
        .and(&mean)
        .and(&ls)
        .and(&noise)
        .for_each(|r, &m, &l, &e| *r = m + l.exp() * e);
    let squashed = raw.mapv(f64::tanh);
    let mut log_prob = Array1::zeros(mean.nrows());
    for (b, lp) in log_prob.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..mean.ncols() {
            let e = noise[[b, j]];
            s += -0.5 * e * e - ls[[b, j]] - HALF_LN_2PI - log1m_tanh_sq(raw[[b, j]]);
        }
        *lp = s;
    }
    HeadSample {
        raw,
        squashed,
        log_prob,
        noise,
        log_std: ls,
        log_std_free,
    }
}

impl HeadSample {
    /// Chain rule from `∂L/∂squashed` and `∂L/∂log_prob` to `∂L/∂mean` and
    /// `∂L/∂log_std` (pre-clamp). Noise is held fixed (reparameterisation).
    pub fn backward(
        &self,
        d_squashed: ArrayView2<f64>,
        d_log_prob: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (bsz, a) = self.raw.dim();
        let mut d_mean = Array2::zeros((bsz, a));
        let mut d_ls = Array2::zeros((bsz, a));
        for b in 0..bsz {
            for j in 0..a {
                let t = self.squashed[[b, j]];
                let sigma = self.log_std[[b, j]].exp();
                let e = self.noise[[b, j]];
                // d raw: from squashed and from the log-det correction
                let d_raw = d_squashed[[b, j]] * (1.0 - t * t) + d_log_prob[b] * 2.0 * t;
                d_mean[[b, j]] = d_raw;
                if self.log_std_free[[b, j]] {
                    d_ls[[b, j]] = d_raw * sigma * e - d_log_prob[b];
                }
            }
        }
        (d_mean, d_ls)
    }
}

/// Log-density of an already-squashed action under the head.
pub fn log_prob_of_squashed(mean: &[f64], log_std: &[f64], squashed: &[f64]) -> f64 {
    const EDGE: f64 = 1.0 - 1e-9;
    let mut s = 0.0;
    for j in 0..mean.len() {
        let y = squashed[j].clamp(-EDGE, EDGE);
        let u = y.atanh();
        let ls = log_std[j].clamp(LOG_STD_MIN, LOG_STD_MAX);
        let e = (u - mean[j]) / ls.exp();
        s += -0.5 * e * e - ls - HALF_LN_2PI - log1m_tanh_sq(u);
    }
    s
}
