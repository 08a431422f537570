//! β-mixture sampling-based fitted value iteration on small deterministic
//! MDPs over `[0, 1]^d`, with half-normal model corruption and an exact-VI
//! oracle.
//!
//! Each backup draws its next state from the true dynamics with probability
//! `β` and from the corrupted model otherwise. The Bernoulli, half-normal and
//! direction draws are consumed on every backup whether used or not, so that
//! `σ = 0` runs are bit-identical across `β`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::SeededRng;
use crate::stats::{half_normal_cdf, ks_distance, mean, nonnegative_histogram, std_dev, Histogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardFn {
    /// `exp(−‖s − center‖²/width)` with the centre on the diagonal.
    Peak { center: f64, width: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FviMdp {
    pub name: String,
    pub dim: usize,
    /// Unit displacement per action; the step scales it.
    pub actions: Vec<Vec<f64>>,
    pub step: f64,
    pub reward: RewardFn,
    pub gamma: f64,
    pub r_max: f64,
}

impl FviMdp {
    pub fn line_world() -> Self {
        Self {
            name: "line_world".into(),
            dim: 1,
            actions: vec![vec![-1.0], vec![0.0], vec![1.0]],
            step: 0.05,
            reward: RewardFn::Peak { center: 0.8, width: 0.02 },
            gamma: 0.95,
            r_max: 1.0,
        }
    }

    pub fn grid_world_2d() -> Self {
        Self {
            name: "grid_world_2d".into(),
            dim: 2,
            actions: vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, -1.0],
            ],
            step: 0.05,
            reward: RewardFn::Peak { center: 0.8, width: 0.02 },
            gamma: 0.95,
            r_max: 1.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "line_world" => Ok(Self::line_world()),
            "grid_world_2d" => Ok(Self::grid_world_2d()),
            other => Err(Error::Config(format!("unknown FVI MDP {other}"))),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn transition(&self, s: &[f64], a: usize) -> Vec<f64> {
        s.iter()
            .zip(&self.actions[a])
            .map(|(x, d)| (x + self.step * d).clamp(0.0, 1.0))
            .collect()
    }

    pub fn reward(&self, s: &[f64], _a: usize) -> f64 {
        match self.reward {
            RewardFn::Peak { center, width } => {
                let d2: f64 = s.iter().map(|x| (x - center).powi(2)).sum();
                (-d2 / width).exp()
            }
            RewardFn::Constant { value } => value,
        }
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim).map(|_| rng.gen::<f64>()).collect()
    }

    /// Smallest horizon with `γ^h·V_max < 1e−4`.
    pub fn truncation_horizon(&self) -> usize {
        if self.gamma == 0.0 {
            return 1;
        }
        ((1e-4 / self.v_max()).ln() / self.gamma.ln()).floor() as usize + 1
    }
}

/// Piecewise-multilinear function on a uniform grid with `g` knots per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFn {
    pub dim: usize,
    pub g: usize,
    /// Knot values, first axis fastest.
    pub values: Vec<f64>,
}

impl ValueFn {
    pub fn zeros(dim: usize, g: usize) -> Self {
        assert!(g >= 2 && (1..=2).contains(&dim), "grid needs g >= 2 and d in {{1, 2}}");
        Self {
            dim,
            g,
            values: vec![0.0; g.pow(dim as u32)],
        }
    }

    pub fn n_knots(&self) -> usize {
        self.values.len()
    }

    pub fn knot(&self, idx: usize) -> Vec<f64> {
        let h = 1.0 / (self.g - 1) as f64;
        let mut rest = idx;
        (0..self.dim)
            .map(|_| {
                let i = rest % self.g;
                rest /= self.g;
                i as f64 * h
            })
            .collect()
    }

    /// Non-zero basis weights at `s`: at most `2^d` (knot, weight) pairs.
    pub fn basis(&self, s: &[f64]) -> Vec<(usize, f64)> {
        let cells = (self.g - 1) as f64;
        let mut lo = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for d in 0..self.dim {
            let x = s[d].clamp(0.0, 1.0) * cells;
            let i = (x.floor() as usize).min(self.g - 2);
            lo[d] = i;
            frac[d] = x - i as f64;
        }
        let mut out = Vec::with_capacity(1 << self.dim);
        for corner in 0..(1usize << self.dim) {
            let mut idx = 0;
            let mut stride = 1;
            let mut w = 1.0;
            for d in 0..self.dim {
                let up = (corner >> d) & 1;
                idx += (lo[d] + up) * stride;
                stride *= self.g;
                w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            if w != 0.0 {
                out.push((idx, w));
            }
        }
        out
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        self.basis(s).iter().map(|&(i, w)| w * self.values[i]).sum()
    }

    /// Lipschitz constant (Euclidean) of the interpolant.
    pub fn lipschitz(&self) -> f64 {
        let cells = (self.g - 1) as f64;
        let mut worst = 0.0f64;
        let mut stride = 1;
        for _ in 0..self.dim {
            for i in 0..self.n_knots() {
                let axis_pos = (i / stride) % self.g;
                if axis_pos + 1 < self.g {
                    worst = worst.max((self.values[i + stride] - self.values[i]).abs());
                }
            }
            stride *= self.g;
        }
        worst * cells * (self.dim as f64).sqrt()
    }

    pub fn clipped(mut self, v_max: f64) -> Self {
        for v in &mut self.values {
            *v = v.clamp(0.0, v_max);
        }
        self
    }
}

pub fn half_normal<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z.abs()
}

/// True dynamics plus a half-normal displacement in a uniform direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptedModel {
    pub sigma: f64,
}

impl CorruptedModel {
    /// Always consumes one half-normal and one direction draw.
    pub fn predict<R: Rng + ?Sized>(&self, mdp: &FviMdp, s: &[f64], a: usize, rng: &mut R) -> Vec<f64> {
        let xi = half_normal(self.sigma, rng);
        let u: f64 = rng.gen();
        let dir = if mdp.dim == 1 {
            vec![if u < 0.5 { -1.0 } else { 1.0 }]
        } else {
            let th = std::f64::consts::TAU * u;
            vec![th.cos(), th.sin()]
        };
        mdp.transition(s, a)
            .iter()
            .zip(&dir)
            .map(|(x, d)| (x + xi * d).clamp(0.0, 1.0))
            .collect()
    }
}

/// Per-state targets `max_a r(s, a) + γ V(s′)`, clipped to `[0, V_max]`.
pub fn beta_mixture_backup<R: Rng + ?Sized>(
    v: &ValueFn,
    states: &[Vec<f64>],
    mdp: &FviMdp,
    model: &CorruptedModel,
    beta: f64,
    rng: &mut R,
) -> Vec<f64> {
    let v_max = mdp.v_max();
    states
        .iter()
        .map(|s| {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions() {
                let real = rng.gen::<f64>() < beta;
                let corrupted = model.predict(mdp, s, a, rng);
                let next = if real { mdp.transition(s, a) } else { corrupted };
                best = best.max(mdp.reward(s, a) + mdp.gamma * v.eval(&next));
            }
            best.clamp(0.0, v_max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitNorm {
    L2,
    /// Iteratively reweighted least squares, at most 50 inner iterations.
    L1,
}

pub const RIDGE: f64 = 1e-8;
const IRLS_MAX: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Knot values before clipping.
    pub raw: Vec<f64>,
    pub ridge: f64,
    pub irls_iterations: usize,
}

/// Symmetric positive-definite band matrix; `band[i][k] = M[i][i − k]`.
struct Band {
    n: usize,
    b: usize,
    band: Vec<f64>,
}

impl Band {
    fn new(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            band: vec![0.0; n * (b + 1)],
        }
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        &mut self.band[i * (self.b + 1) + (i - j)]
    }

    /// In-place Cholesky then solve; `None` on a non-positive pivot.
    fn solve(mut self, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
        let (n, b) = (self.n, self.b);
        let w = b + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            for j in j0..=i {
                let mut sum = self.band[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(b));
                for k in k0..j {
                    sum -= self.band[i * w + (i - k)] * self.band[j * w + (j - k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    self.band[i * w] = sum.sqrt();
                } else {
                    self.band[i * w + (i - j)] = sum / self.band[j * w];
                }
            }
        }
        for i in 0..n {
            let mut sum = rhs[i];
            for k in i.saturating_sub(b)..i {
                sum -= self.band[i * w + (i - k)] * rhs[k];
            }
            rhs[i] = sum / self.band[i * w];
        }
        for i in (0..n).rev() {
            let mut sum = rhs[i];
            for k in (i + 1)..n.min(i + b + 1) {
                sum -= self.band[k * w + (k - i)] * rhs[k];
            }
            rhs[i] = sum / self.band[i * w];
        }
        Some(rhs)
    }
}

/// Weighted ridge least squares toward `prev`:
/// `min Σ wᵢ (f(sᵢ) − yᵢ)² + λ Σ (vⱼ − prevⱼ)²`.
fn weighted_fit(prev: &ValueFn, bases: &[Vec<(usize, f64)>], targets: &[f64], weights: &[f64]) -> (Vec<f64>, f64) {
    let n = prev.n_knots();
    let b = if prev.dim == 1 { 1 } else { prev.g + 1 };
    let mut supported = vec![false; n];
    for basis in bases {
        for &(i, _) in basis {
            supported[i] = true;
        }
    }
    let mut ridge = RIDGE;
    loop {
        let mut m = Band::new(n, b);
        let mut rhs: Vec<f64> = prev.values.iter().map(|v| ridge * v).collect();
        for j in 0..n {
            *m.at(j, j) += ridge;
        }
        for ((basis, &y), &w) in bases.iter().zip(targets).zip(weights) {
            for &(i, wi) in basis {
                rhs[i] += w * wi * y;
                for &(j, wj) in basis {
                    if j <= i {
                        *m.at(i, j) += w * wi * wj;
                    }
                }
            }
        }
        if let Some(mut x) = m.solve(rhs) {
            for (j, v) in x.iter_mut().enumerate() {
                if !supported[j] {
                    *v = prev.values[j];
                }
            }
            return (x, ridge);
        }
        log::warn!("value fit singular at ridge {ridge:e}; increasing");
        ridge *= 100.0;
        if ridge > 1.0 {
            return (prev.values.clone(), ridge);
        }
    }
}

/// Fit knot values to `targets`; knots without support keep `prev` values.
/// Returned knots are clipped to `[0, v_max]`.
pub fn fit_value(
    states: &[Vec<f64>],
    targets: &[f64],
    prev: &ValueFn,
    norm: FitNorm,
    v_max: f64,
) -> Result<(ValueFn, FitReport)> {
    if states.is_empty() {
        return Err(Error::NotEnoughData { have: 0, need: 1 });
    }
    if states.len() != targets.len() {
        return Err(Error::LengthMismatch(states.len(), targets.len()));
    }
    let bases: Vec<Vec<(usize, f64)>> = states.iter().map(|s| prev.basis(s)).collect();
    let mut weights = vec![1.0; states.len()];
    let (mut raw, mut ridge) = weighted_fit(prev, &bases, targets, &weights);
    let mut iters = 0;
    if norm == FitNorm::L1 {
        for _ in 0..IRLS_MAX {
            iters += 1;
            for (i, basis) in bases.iter().enumerate() {
                let f: f64 = basis.iter().map(|&(j, w)| w * raw[j]).sum();
                weights[i] = 1.0 / (f - targets[i]).abs().max(1e-6);
            }
            let (next, r) = weighted_fit(prev, &bases, targets, &weights);
            ridge = r;
            let change = next.iter().zip(&raw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            raw = next;
            if change < 1e-10 {
                break;
            }
        }
    }
    let fitted = ValueFn {
        values: raw.clone(),
        ..prev.clone()
    }
    .clipped(v_max);
    Ok((
        fitted,
        FitReport {
            raw,
            ridge,
            irls_iterations: iters,
        },
    ))
}

/// `Σ |f(sᵢ) − yᵢ|^p` for the given knot values.
pub fn fit_objective(v: &ValueFn, states: &[Vec<f64>], targets: &[f64], norm: FitNorm) -> f64 {
    let p = match norm {
        FitNorm::L2 => 2,
        FitNorm::L1 => 1,
    };
    states.iter().zip(targets).map(|(s, y)| (v.eval(s) - y).abs().powi(p)).sum()
}

/// Action maximising `r(s, a) + γ V(T(s, a))` under the true dynamics
/// (first maximum on ties).
pub fn greedy_action(mdp: &FviMdp, v: &ValueFn, s: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..mdp.n_actions() {
        let q = mdp.reward(s, a) + mdp.gamma * v.eval(&mdp.transition(s, a));
        if q > best.1 {
            best = (a, q);
        }
    }
    best.0
}

/// Discounted return of the greedy policy from `s` in the true MDP.
pub fn greedy_return(mdp: &FviMdp, v: &ValueFn, s: &[f64], horizon: usize) -> f64 {
    let mut s = s.to_vec();
    let mut ret = 0.0;
    let mut disc = 1.0;
    for _ in 0..horizon {
        let a = greedy_action(mdp, v, &s);
        ret += disc * mdp.reward(&s, a);
        disc *= mdp.gamma;
        s = mdp.transition(&s, a);
    }
    ret
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub v: ValueFn,
    pub iterations: usize,
    pub horizon: usize,
}

impl ExactSolution {
    /// Optimal return from `s`, realised by greedy rollout on the fine grid.
    pub fn optimal_return(&self, mdp: &FviMdp, s: &[f64]) -> f64 {
        greedy_return(mdp, &self.v, s, self.horizon)
    }
}

/// Value iteration on a fine grid until the sup-norm change is below `tol`.
pub fn exact_vi(mdp: &FviMdp, fine_g: usize, tol: f64) -> Result<ExactSolution> {
    if fine_g < 2 || tol <= 0.0 {
        return Err(Error::Config("exact VI needs fine_g >= 2 and tol > 0".into()));
    }
    let mut v = ValueFn::zeros(mdp.dim, fine_g);
    let knots: Vec<Vec<f64>> = (0..v.n_knots()).map(|i| v.knot(i)).collect();
    let succ: Vec<Vec<(f64, Vec<(usize, f64)>)>> = knots
        .iter()
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| (mdp.reward(s, a), v.basis(&mdp.transition(s, a))))
                .collect()
        })
        .collect();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let next: Vec<f64> = succ
            .iter()
            .map(|acts| {
                acts.iter()
                    .map(|(r, basis)| r + mdp.gamma * basis.iter().map(|&(j, w)| w * v.values[j]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let change = next.iter().zip(&v.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v.values = next;
        if change < tol || iterations > 100_000 {
            break;
        }
    }
    Ok(ExactSolution {
        v,
        iterations,
        horizon: mdp.truncation_horizon(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FviConfig {
    pub beta: f64,
    pub sigma: f64,
    /// States per iteration.
    pub n: usize,
    pub k: usize,
    pub norm: FitNorm,
    pub grid: usize,
    /// ρ-samples for the discrepancy estimate.
    pub n_eval: usize,
}

impl Default for FviConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma: 0.05,
            n: 1024,
            k: 40,
            norm: FitNorm::L2,
            grid: 128,
            n_eval: 200,
        }
    }
}

impl FviConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta) && self.sigma >= 0.0 && self.n >= 1 && self.grid >= 2 && self.n_eval >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid FVI config {self:?}")))
        }
    }

    /// Expected real samples per iteration, `N·|A|·β`.
    pub fn n_real(&self, mdp: &FviMdp) -> f64 {
        self.n as f64 * mdp.n_actions() as f64 * self.beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FviResult {
    pub v: ValueFn,
    /// `(E_ρ |V*(s) − V^{π_K}(s)|^p)^{1/p}`.
    pub discrepancy: f64,
}

/// ρ-samples and their optimal returns, shared by every cell of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub states: Vec<Vec<f64>>,
    pub optimal: Vec<f64>,
}

impl EvalSet {
    pub fn new(mdp: &FviMdp, oracle: &ExactSolution, n_eval: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).split("rho");
        let states: Vec<Vec<f64>> = (0..n_eval).map(|_| mdp.sample_state(&mut rng)).collect();
        let optimal = states.iter().map(|s| oracle.optimal_return(mdp, s)).collect();
        Self { states, optimal }
    }
}

pub fn discrepancy(mdp: &FviMdp, v: &ValueFn, eval: &EvalSet, horizon: usize, norm: FitNorm) -> f64 {
    let p = match norm {
        FitNorm::L2 => 2.0,
        FitNorm::L1 => 1.0,
    };
    let total: f64 = eval
        .states
        .iter()
        .zip(&eval.optimal)
        .map(|(s, vs)| (vs - greedy_return(mdp, v, s, horizon)).abs().powf(p))
        .sum();
    (total / eval.states.len() as f64).powf(1.0 / p)
}

/// `K` backup-and-fit iterations from `V₀ ≡ 0`, then the discrepancy of the
/// greedy policy.
pub fn run_fvi(mdp: &FviMdp, cfg: &FviConfig, oracle: &ExactSolution, seed: u64) -> Result<FviResult> {
    let eval = EvalSet::new(mdp, oracle, cfg.n_eval, seed);
    run_fvi_with(mdp, cfg, oracle, &eval, seed)
}

pub fn run_fvi_with(
    mdp: &FviMdp,
    cfg: &FviConfig,
    oracle: &ExactSolution,
    eval: &EvalSet,
    seed: u64,
) -> Result<FviResult> {
    cfg.validate()?;
    let root = SeededRng::new(seed);
    let mut state_rng = root.split("states");
    let mut backup_rng = root.split("backup");
    let model = CorruptedModel { sigma: cfg.sigma };
    let mut v = ValueFn::zeros(mdp.dim, cfg.grid);
    for _ in 0..cfg.k {
        let states: Vec<Vec<f64>> = (0..cfg.n).map(|_| mdp.sample_state(&mut state_rng)).collect();
        let targets = beta_mixture_backup(&v, &states, mdp, &model, cfg.beta, &mut backup_rng);
        v = fit_value(&states, &targets, &v, cfg.norm, mdp.v_max())?.0;
    }
    let discrepancy = discrepancy(mdp, &v, eval, oracle.horizon, cfg.norm);
    Ok(FviResult { v, discrepancy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub n_real: usize,
    /// States per iteration, `round(N_real/(β·|A|))`.
    pub n: usize,
    pub sigma: f64,
    pub k: usize,
    pub seed: u64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub beta: f64,
    pub n_real: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
    /// `(N_real, argmin β of the mean discrepancy)` in ascending `N_real`.
    pub argmin: Vec<(usize, f64)>,
}

pub fn states_for(n_real: usize, beta: f64, n_actions: usize) -> usize {
    ((n_real as f64 / (beta * n_actions as f64)).round() as usize).max(1)
}

/// Full factorial sweep over `betas × n_reals × seeds`; cells run through
/// `par::map` and share one oracle.
pub fn beta_sweep(
    mdp: &FviMdp,
    betas: &[f64],
    n_reals: &[usize],
    base: &FviConfig,
    oracle: &ExactSolution,
    seeds: &[u64],
    exec: Exec,
) -> Result<SweepResult> {
    if betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
        return Err(Error::Config("sweep betas must lie in (0, 1]".into()));
    }
    let evals: Vec<EvalSet> = par::map(exec, seeds.to_vec(), |s| EvalSet::new(mdp, oracle, base.n_eval, s));
    let mut jobs = Vec::new();
    for &n_real in n_reals {
        for &beta in betas {
            for (si, &seed) in seeds.iter().enumerate() {
                jobs.push((beta, n_real, si, seed));
            }
        }
    }
    let cells: Vec<SweepCell> = par::map(exec, jobs, |(beta, n_real, si, seed)| {
        let cfg = FviConfig {
            beta,
            n: states_for(n_real, beta, mdp.n_actions()),
            ..base.clone()
        };
        run_fvi_with(mdp, &cfg, oracle, &evals[si], seed).map(|r| SweepCell {
            beta,
            n_real,
            n: cfg.n,
            sigma: cfg.sigma,
            k: cfg.k,
            seed,
            discrepancy: r.discrepancy,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let summary = summarize(&cells, betas, n_reals);
    let argmin = argmin_by_n_real(&summary, n_reals);
    Ok(SweepResult { cells, summary, argmin })
}

pub fn summarize(cells: &[SweepCell], betas: &[f64], n_reals: &[usize]) -> Vec<SweepSummary> {
    let mut out = Vec::new();
    for &n_real in n_reals {
        for &beta in betas {
            let d: Vec<f64> = cells
                .iter()
                .filter(|c| c.beta == beta && c.n_real == n_real)
                .map(|c| c.discrepancy)
                .collect();
            out.push(SweepSummary {
                beta,
                n_real,
                mean: mean(&d),
                std: if d.len() > 1 { std_dev(&d) } else { 0.0 },
            });
        }
    }
    out
}

/// Lowest-mean β per `N_real` (smaller β on exact ties).
pub fn argmin_by_n_real(summary: &[SweepSummary], n_reals: &[usize]) -> Vec<(usize, f64)> {
    n_reals
        .iter()
        .map(|&n| {
            let best = summary
                .iter()
                .filter(|s| s.n_real == n)
                .fold(None::<&SweepSummary>, |acc, s| match acc {
                    Some(b) if b.mean < s.mean || (b.mean == s.mean && b.beta <= s.beta) => Some(b),
                    _ => Some(s),
                });
            (n, best.map_or(f64::NAN, |b| b.beta))
        })
        .collect()
}

pub fn is_non_decreasing(argmin: &[(usize, f64)]) -> bool {
    argmin.windows(2).all(|w| w[1].1 >= w[0].1)
}

/// Fraction of bootstrap resamples of the seed set whose aggregate argmin β
/// is non-decreasing in `N_real`.
pub fn bootstrap_trend(result: &SweepResult, betas: &[f64], n_reals: &[usize], resamples: usize, rng: &mut SeededRng) -> f64 {
    let mut seeds: Vec<u64> = result.cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() || resamples == 0 {
        return 0.0;
    }
    let mut hits = 0;
    for _ in 0..resamples {
        let pick: Vec<u64> = (0..seeds.len()).map(|_| seeds[rng.gen_range(0..seeds.len())]).collect();
        let cells: Vec<SweepCell> = pick
            .iter()
            .flat_map(|s| result.cells.iter().filter(move |c| c.seed == *s).cloned())
            .collect();
        let summary = summarize(&cells, betas, n_reals);
        if is_non_decreasing(&argmin_by_n_real(&summary, n_reals)) {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    pub histogram: Histogram,
    pub ks: f64,
    pub mean: f64,
}

/// Histogram of `n` half-normal draws and their KS distance to the analytic CDF.
pub fn error_histogram_check(sigma: f64, n: usize, bins: usize, rng: &mut SeededRng) -> Result<ErrorHistogram> {
    let draws: Vec<f64> = (0..n).map(|_| half_normal(sigma, rng)).collect();
    let histogram = nonnegative_histogram(&draws, bins)?;
    let ks = if sigma == 0.0 {
        // Point mass at zero: the empirical CDF coincides with it.
        if draws.iter().all(|&x| x == 0.0) {
            0.0
        } else {
            1.0
        }
    } else {
        ks_distance(&draws, |x| half_normal_cdf(x, sigma))
    };
    Ok(ErrorHistogram {
        histogram,
        ks,
        mean: mean(&draws),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_horizon_for_line_world() {
        let mdp = FviMdp::line_world();
        let h = mdp.truncation_horizon();
        assert_eq!(h, 238);
        assert!(mdp.gamma.powi(h as i32) * mdp.v_max() < 1e-4);
        assert!(mdp.gamma.powi(h as i32 - 1) * mdp.v_max() >= 1e-4);
    }

    #[test]
    fn basis_weights_sum_to_one() {
        let v = ValueFn::zeros(2, 5);
        for s in [[0.0, 0.0], [1.0, 1.0], [0.37, 0.91], [0.25, 0.5]] {
            let w: f64 = v.basis(&s).iter().map(|p| p.1).sum();
            assert!((w - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn band_solver_matches_dense_tridiagonal() {
        let mut m = Band::new(3, 1);
        *m.at(0, 0) = 4.0;
        *m.at(1, 1) = 5.0;
        *m.at(2, 2) = 6.0;
        *m.at(1, 0) = 1.0;
        *m.at(2, 1) = 2.0;
        let x = m.solve(vec![6.0, 17.0, 22.0]).unwrap();
        // [[4,1,0],[1,5,2],[0,2,6]] · [1,2,3]
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
