//! Bootstrapped ensemble of probabilistic dynamics models.
//!
//! Each member maps normalised `(s, a)` to a diagonal Gaussian over
//! `(Δs, r)`. The raw log-variance head is squashed into learnable soft
//! bounds:
//!
//! ```text
//! lv = max − softplus(max − raw)
//! lv = min + softplus(lv − min)
//! ```
//!
//! Training minimises the per-sample NLL `Σ_d (μ_d − y_d)² e^{−lv_d} + lv_d`
//! (constant dropped) plus `0.01·(Σ max − Σ min)`, with early stopping on a
//! shared hold-out split.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::buffer::{ModelBuffer, ReplayBuffer};
use crate::envs::{EnvSpec, Policy, Source, Transition};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::dense::{Activation, DenseNet, Gradients};
use crate::nn::gaussian::softplus;
use crate::nn::AdamState;
use crate::par::{self, Exec};
use crate::rng::SeededRng;
use crate::stats::{nonnegative_histogram, Histogram};

pub const BOUND_REG: f64 = 0.01;
const INIT_MAX_LOGVAR: f64 = 0.5;
const INIT_MIN_LOGVAR: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    /// Use the analytic reward instead of the learned reward head.
    pub known_reward: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            elites: 2,
            hidden: vec![64, 64],
            known_reward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTrainConfig {
    pub holdout_frac: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Relative hold-out improvement that resets the patience counter.
    pub tolerance: f64,
    pub lr: f64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        Self {
            holdout_frac: 0.2,
            patience: 5,
            max_epochs: 20,
            batch_size: 64,
            tolerance: 0.01,
            lr: 1e-3,
        }
    }
}

impl ModelTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.holdout_frac > 0.0
            && self.holdout_frac < 0.5
            && self.patience >= 1
            && self.max_epochs >= 1
            && self.batch_size >= 1
            && self.tolerance >= 0.0
            && self.lr >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model training config {self:?}")))
        }
    }

    /// Smallest D_env size accepted by [`train_ensemble`].
    pub fn min_samples(&self) -> usize {
        (2.0 / self.holdout_frac).ceil() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub net: DenseNet,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
    adam: AdamState,
}

#[derive(Debug, Clone)]
pub struct MemberGrad {
    pub net: Gradients,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

impl MemberGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.net.flat();
        v.extend(&self.max_logvar);
        v.extend(&self.min_logvar);
        v
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Member {
    pub fn new(in_dim: usize, out_dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Self {
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * out_dim);
        Self::from_parts(
            DenseNet::new(&sizes, Activation::Relu, Activation::Identity, rng),
            vec![INIT_MAX_LOGVAR; out_dim],
            vec![INIT_MIN_LOGVAR; out_dim],
        )
    }

    pub fn from_parts(net: DenseNet, max_logvar: Vec<f64>, min_logvar: Vec<f64>) -> Self {
        Self {
            net,
            max_logvar,
            min_logvar,
            adam: AdamState::new(1e-3),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.max_logvar.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.net.params_flat();
        v.extend(&self.max_logvar);
        v.extend(&self.min_logvar);
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.net.num_params();
        let d = self.out_dim();
        if flat.len() != n + 2 * d {
            return Err(Error::Dimension {
                context: "member params",
                expected: n + 2 * d,
                got: flat.len(),
            });
        }
        self.net.set_params_flat(&flat[..n])?;
        self.max_logvar.copy_from_slice(&flat[n..n + d]);
        self.min_logvar.copy_from_slice(&flat[n + d..]);
        Ok(())
    }

    fn bound(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut lv = raw.clone();
        for mut row in lv.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let hi = self.max_logvar[j];
                let lo = self.min_logvar[j];
                let l1 = hi - softplus(hi - *v);
                *v = lo + softplus(l1 - lo);
            }
        }
        lv
    }

    /// Mean and bounded log-variance for normalised inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(x)?;
        let d = self.out_dim();
        let mean = out.slice(s![.., ..d]).to_owned();
        let lv = self.bound(&out.slice(s![.., d..]).to_owned());
        Ok((mean, lv))
    }

    /// Batch-mean NLL and its gradient; `reg` weights the bound penalty.
    pub fn loss_grad(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, reg: f64) -> Result<(f64, MemberGrad)> {
        let d = self.out_dim();
        if y.ncols() != d || y.nrows() != x.nrows() || x.nrows() == 0 {
            return Err(Error::Dimension {
                context: "model targets",
                expected: d,
                got: y.ncols(),
            });
        }
        let (out, cache) = self.net.forward_cached(x)?;
        let b = x.nrows() as f64;
        let mut upstream = Array2::zeros(out.raw_dim());
        let mut d_max = vec![0.0; d];
        let mut d_min = vec![0.0; d];
        let mut loss = 0.0;
        for i in 0..x.nrows() {
            for j in 0..d {
                let mu = out[[i, j]];
                let raw = out[[i, d + j]];
                let (hi, lo) = (self.max_logvar[j], self.min_logvar[j]);
                let l1 = hi - softplus(hi - raw);
                let lv = lo + softplus(l1 - lo);
                let err = mu - y[[i, j]];
                let inv = (-lv).exp();
                loss += err * err * inv + lv;
                let g_mu = 2.0 * err * inv / b;
                let g_lv = (1.0 - err * err * inv) / b;
                let s2 = sigmoid(l1 - lo);
                let g_l1 = g_lv * s2;
                d_min[j] += g_lv * (1.0 - s2);
                let s1 = sigmoid(hi - raw);
                upstream[[i, j]] = g_mu;
                upstream[[i, d + j]] = g_l1 * s1;
                d_max[j] += g_l1 * (1.0 - s1);
            }
        }
        loss /= b;
        if reg != 0.0 {
            loss += reg * (self.max_logvar.iter().sum::<f64>() - self.min_logvar.iter().sum::<f64>());
            d_max.iter_mut().for_each(|g| *g += reg);
            d_min.iter_mut().for_each(|g| *g -= reg);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("model nll"));
        }
        let (net, _) = self.net.backward(&cache, upstream.view())?;
        Ok((
            loss,
            MemberGrad {
                net,
                max_logvar: d_max,
                min_logvar: d_min,
            },
        ))
    }

    pub fn apply(&mut self, g: &MemberGrad) -> Result<()> {
        let mut slices = self.net.param_slices_mut();
        slices.push(&mut self.max_logvar);
        slices.push(&mut self.min_logvar);
        let mut gs = g.net.slices();
        gs.push(&g.max_logvar);
        gs.push(&g.min_logvar);
        self.adam.step(slices, &gs)
    }

    /// Mean squared error of the mean head.
    pub fn mse(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
        let (mean, _) = self.forward(x)?;
        Ok((&mean - &y).mapv(|e| e * e).mean().unwrap_or(0.0))
    }
}

/// Gaussian NLL (constant dropped) of `member` on normalised inputs `x` and
/// targets `y = (Δs, r)`, averaged over the batch.
pub fn model_nll(member: &Member, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    Ok(member.loss_grad(x, y, 0.0)?.0)
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub spec: EnvSpec,
    pub config: EnsembleConfig,
    pub members: Vec<Member>,
    pub elites: Vec<usize>,
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    /// Per-member hold-out MSE from the last training.
    pub holdout_losses: Vec<f64>,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub holdout_losses: Vec<f64>,
    pub epochs: Vec<usize>,
    /// Hold-out MSE after every epoch, per member.
    pub curves: Vec<Vec<f64>>,
    pub elites: Vec<usize>,
    /// Indices into the training data that formed the shared hold-out split.
    pub holdout_indices: Vec<usize>,
}

impl EnsembleModel {
    pub fn new(spec: &EnvSpec, config: EnsembleConfig, rng: &mut SeededRng) -> Result<Self> {
        if config.members == 0 || config.elites == 0 || config.elites > config.members {
            return Err(Error::Config(format!("invalid ensemble config {config:?}")));
        }
        let in_dim = spec.state_dim + spec.action_dim;
        let out_dim = spec.state_dim + 1;
        let members = (0..config.members)
            .map(|i| {
                let mut r = rng.split_index(i as u64);
                Member::new(in_dim, out_dim, &config.hidden, &mut r)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            elites: (0..config.elites).collect(),
            config,
            members,
            in_mean: vec![0.0; in_dim],
            in_std: vec![1.0; in_dim],
            holdout_losses: Vec::new(),
            trained: false,
        })
    }

    /// Assemble an already-trained model (identity input normalisation).
    pub fn from_members(spec: &EnvSpec, members: Vec<Member>, elites: Vec<usize>) -> Result<Self> {
        if members.is_empty() || elites.is_empty() || elites.iter().any(|&e| e >= members.len()) {
            return Err(Error::Config("bad member or elite set".into()));
        }
        let in_dim = spec.state_dim + spec.action_dim;
        Ok(Self {
            spec: spec.clone(),
            config: EnsembleConfig {
                members: members.len(),
                elites: elites.len(),
                hidden: Vec::new(),
                known_reward: false,
            },
            members,
            elites,
            in_mean: vec![0.0; in_dim],
            in_std: vec![1.0; in_dim],
            holdout_losses: Vec::new(),
            trained: true,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Mean hold-out MSE over the elites from the last training.
    pub fn elite_holdout_loss(&self) -> Option<f64> {
        if self.holdout_losses.is_empty() {
            return None;
        }
        Some(self.elites.iter().map(|&e| self.holdout_losses[e]).sum::<f64>() / self.elites.len() as f64)
    }

    pub fn normalize(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut x = concatenate(Axis(1), &[s.view(), a.view()]).map_err(|_| Error::Dimension {
            context: "model input rows",
            expected: s.nrows(),
            got: a.nrows(),
        })?;
        if x.ncols() != self.in_mean.len() {
            return Err(Error::Dimension {
                context: "model input",
                expected: self.in_mean.len(),
                got: x.ncols(),
            });
        }
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.in_mean[j]) / self.in_std[j];
            }
        }
        Ok(x)
    }

    /// Normalised inputs and `(Δs, r)` targets for a set of transitions.
    pub fn arrays(&self, data: &[Transition]) -> Result<(Array2<f64>, Array2<f64>)> {
        let sd = self.spec.state_dim;
        let ad = self.spec.action_dim;
        let n = data.len();
        let mut s = Array2::zeros((n, sd));
        let mut a = Array2::zeros((n, ad));
        let mut y = Array2::zeros((n, sd + 1));
        for (i, t) in data.iter().enumerate() {
            for j in 0..sd {
                s[[i, j]] = t.s[j];
                y[[i, j]] = t.s2[j] - t.s[j];
            }
            for j in 0..ad {
                a[[i, j]] = t.a[j];
            }
            y[[i, sd]] = t.r;
        }
        Ok((self.normalize(s.view(), a.view())?, y))
    }

    fn fit_normalizer(&mut self, data: &[Transition]) {
        let d = self.in_mean.len();
        let n = data.len() as f64;
        let row = |t: &Transition, j: usize| if j < t.s.len() { t.s[j] } else { t.a[j - t.s.len()] };
        for j in 0..d {
            let m = data.iter().map(|t| row(t, j)).sum::<f64>() / n;
            let v = data.iter().map(|t| (row(t, j) - m).powi(2)).sum::<f64>() / n;
            self.in_mean[j] = m;
            self.in_std[j] = if v.sqrt() < 1e-6 { 1.0 } else { v.sqrt() };
        }
    }

    /// Sample `(s′, r, done)` for a batch: per row, a uniformly chosen elite
    /// and a draw from its Gaussian.
    pub fn predict_batch(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        rng: &mut SeededRng,
    ) -> Result<(Array2<f64>, Array1<f64>, Vec<bool>)> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        let x = self.normalize(s, a)?;
        let n = x.nrows();
        let sd = self.spec.state_dim;
        let d = sd + 1;
        let picks: Vec<usize> = (0..n).map(|_| self.elites[rng.gen_range(0..self.elites.len())]).collect();
        let noise = Array2::<f64>::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        let mut outs = Vec::with_capacity(self.members.len());
        for (m, member) in self.members.iter().enumerate() {
            outs.push(if picks.contains(&m) { Some(member.forward(x.view())?) } else { None });
        }
        let mut s2 = Array2::zeros((n, sd));
        let mut r = Array1::zeros(n);
        let mut done = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, lv) = outs[picks[i]].as_ref().expect("picked member evaluated");
            for j in 0..d {
                let v = mean[[i, j]] + (0.5 * lv[[i, j]]).exp() * noise[[i, j]];
                if j < sd {
                    s2[[i, j]] = s[[i, j]] + v;
                } else {
                    r[i] = v;
                }
            }
            if self.config.known_reward {
                r[i] = self.spec.reward(&s.row(i).to_vec(), &a.row(i).to_vec());
            }
            done.push(self.spec.is_terminal(&s2.row(i).to_vec()));
        }
        if s2.iter().any(|v| !v.is_finite()) || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(s2.iter().copied().collect()));
        }
        Ok((s2, r, done))
    }

    pub fn predict(&self, s: &[f64], a: &[f64], rng: &mut SeededRng) -> Result<(Vec<f64>, f64, bool)> {
        let sv = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Config(e.to_string()))?;
        let av = ArrayView2::from_shape((1, a.len()), a).map_err(|e| Error::Config(e.to_string()))?;
        let (s2, r, done) = self.predict_batch(sv, av, rng)?;
        Ok((s2.row(0).to_vec(), r[0], done[0]))
    }

    /// Deterministic prediction: the average of the elites' mean heads.
    pub fn predict_mean(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        let x = self.normalize(s, a)?;
        let sd = self.spec.state_dim;
        let mut acc = Array2::<f64>::zeros((x.nrows(), sd + 1));
        for &e in &self.elites {
            acc += &self.members[e].forward(x.view())?.0;
        }
        acc /= self.elites.len() as f64;
        let s2 = &s + &acc.slice(s![.., ..sd]);
        Ok((s2, acc.column(sd).to_owned()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("ensemble");
        for (i, m) in self.members.iter().enumerate() {
            ck.push_net(&format!("member{i}"), &m.net);
            ck.push_vec(&format!("member{i}.max_logvar"), &m.max_logvar);
            ck.push_vec(&format!("member{i}.min_logvar"), &m.min_logvar);
        }
        ck.push_vec("in_mean", &self.in_mean);
        ck.push_vec("in_std", &self.in_std);
        ck.meta = serde_json::json!({
            "env": self.spec.name(),
            "elites": self.elites,
            "config": self.config,
            "holdout_losses": self.holdout_losses,
            "trained": self.trained,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, spec: &EnvSpec) -> Result<Self> {
        if ck.kind != "ensemble" {
            return Err(Error::Checkpoint(format!("expected ensemble, found {}", ck.kind)));
        }
        let meta = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing meta {k}")));
        let config: EnsembleConfig = serde_json::from_value(meta("config")?)?;
        let elites: Vec<usize> = serde_json::from_value(meta("elites")?)?;
        let holdout_losses: Vec<f64> = serde_json::from_value(meta("holdout_losses")?)?;
        let trained: bool = serde_json::from_value(meta("trained")?)?;
        let mut members = Vec::with_capacity(config.members);
        for i in 0..config.members {
            members.push(Member::from_parts(
                ck.net(&format!("member{i}"))?,
                ck.vec(&format!("member{i}.max_logvar"))?,
                ck.vec(&format!("member{i}.min_logvar"))?,
            ));
        }
        let mut model = Self::from_members(spec, members, elites)?;
        model.config = config;
        model.in_mean = ck.vec("in_mean")?;
        model.in_std = ck.vec("in_std")?;
        model.holdout_losses = holdout_losses;
        model.trained = trained;
        Ok(model)
    }
}

struct MemberJob<'a> {
    member: &'a mut Member,
    seed: u64,
}

/// Train every member on its own bootstrap resample of the non-hold-out
/// data, with early stopping on the shared hold-out split. Parameters from
/// each member's best hold-out epoch are restored. Members warm-start from
/// their current parameters.
pub fn train_ensemble(
    model: &mut EnsembleModel,
    data: &[Transition],
    cfg: &ModelTrainConfig,
    rng: &mut SeededRng,
    exec: Exec,
) -> Result<TrainReport> {
    cfg.validate()?;
    let need = cfg.min_samples();
    if data.len() < need {
        return Err(Error::NotEnoughData {
            have: data.len(),
            need,
        });
    }
    model.fit_normalizer(data);
    let (x, y) = model.arrays(data)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let n_hold = ((cfg.holdout_frac * data.len() as f64).round() as usize).max(1);
    let hold_idx = &idx[..n_hold];
    let train_idx = &idx[n_hold..];
    let xh = x.select(Axis(0), hold_idx);
    let yh = y.select(Axis(0), hold_idx);
    let xt = x.select(Axis(0), train_idx);
    let yt = y.select(Axis(0), train_idx);

    let seeds: Vec<u64> = (0..model.members.len()).map(|_| rng.gen()).collect();
    let jobs: Vec<MemberJob> = model
        .members
        .iter_mut()
        .zip(seeds)
        .map(|(member, seed)| MemberJob { member, seed })
        .collect();
    let results = par::map(exec, jobs, |job| {
        train_member(job.member, xt.view(), yt.view(), xh.view(), yh.view(), cfg, job.seed)
    });
    let mut report = TrainReport {
        holdout_losses: Vec::new(),
        epochs: Vec::new(),
        curves: Vec::new(),
        elites: Vec::new(),
        holdout_indices: hold_idx.to_vec(),
    };
    for r in results {
        let (best, curve) = r?;
        report.holdout_losses.push(best);
        report.epochs.push(curve.len());
        report.curves.push(curve);
    }
    let mut order: Vec<usize> = (0..model.members.len()).collect();
    order.sort_by(|&a, &b| report.holdout_losses[a].total_cmp(&report.holdout_losses[b]));
    order.truncate(model.config.elites);
    model.elites = order.clone();
    model.holdout_losses = report.holdout_losses.clone();
    model.trained = true;
    report.elites = order;
    Ok(report)
}

fn train_member(
    member: &mut Member,
    xt: ArrayView2<f64>,
    yt: ArrayView2<f64>,
    xh: ArrayView2<f64>,
    yh: ArrayView2<f64>,
    cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = SeededRng::new(seed);
    member.adam.lr = cfg.lr;
    let n = xt.nrows();
    let boot: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let xb = xt.select(Axis(0), &boot);
    let yb = yt.select(Axis(0), &boot);
    let mut best = f64::INFINITY;
    let mut best_params = member.params_flat();
    let mut since = 0;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = xb.select(Axis(0), chunk);
            let by = yb.select(Axis(0), chunk);
            match member.loss_grad(bx.view(), by.view(), BOUND_REG) {
                Ok((_, g)) => {
                    if let Err(e) = member.apply(&g) {
                        log::warn!("model step rejected: {e}");
                    }
                }
                Err(Error::NonFiniteLoss(_)) => log::warn!("model step rejected: non-finite loss"),
                Err(e) => return Err(e),
            }
        }
        let loss = member.mse(xh, yh)?;
        curve.push(loss);
        if epoch == 0 || loss < best - cfg.tolerance * best.abs() {
            best = loss;
            best_params = member.params_flat();
            since = 0;
        } else {
            since += 1;
            if loss < best {
                best = loss;
                best_params = member.params_flat();
            }
            if since >= cfg.patience {
                break;
            }
        }
    }
    member.set_params_flat(&best_params)?;
    Ok((best, curve))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutReport {
    pub added: usize,
    /// D_env index each branch started from.
    pub start_indices: Vec<usize>,
    /// Transitions contributed by each branch.
    pub branch_lengths: Vec<usize>,
}

/// Roll `f` branches of up to `k` model steps from states sampled uniformly
/// from `d_env`, following `policy`, and append them to `buffer`.
pub fn generate_rollouts<P: Policy + ?Sized>(
    model: &EnsembleModel,
    policy: &P,
    d_env: &ReplayBuffer,
    k: usize,
    f: usize,
    rng: &mut SeededRng,
    buffer: &mut ModelBuffer,
) -> Result<RolloutReport> {
    if !model.trained {
        return Err(Error::UntrainedModel);
    }
    if d_env.is_empty() {
        return Err(Error::EmptyBuffers);
    }
    if k == 0 || f == 0 {
        return Err(Error::Config("rollouts need k >= 1 and F >= 1".into()));
    }
    let sd = model.spec.state_dim;
    let mut report = RolloutReport {
        added: 0,
        start_indices: Vec::with_capacity(f),
        branch_lengths: vec![0; f],
    };
    let mut active: Vec<usize> = Vec::with_capacity(f);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(f);
    for b in 0..f {
        let i = d_env.sample_index(rng).expect("non-empty");
        report.start_indices.push(i);
        let s = d_env.as_slice()[i].s.clone();
        if !model.spec.is_terminal(&s) {
            active.push(b);
        }
        states.push(s);
    }
    for _ in 0..k {
        if active.is_empty() {
            break;
        }
        let mut s = Array2::zeros((active.len(), sd));
        for (row, &b) in active.iter().enumerate() {
            for j in 0..sd {
                s[[row, j]] = states[b][j];
            }
        }
        let a = policy.act_batch(s.view(), rng)?;
        let (s2, r, done) = model.predict_batch(s.view(), a.view(), rng)?;
        let mut next_active = Vec::with_capacity(active.len());
        for (row, &b) in active.iter().enumerate() {
            let next = s2.row(row).to_vec();
            buffer.push(Transition {
                s: states[b].clone(),
                a: a.row(row).to_vec(),
                r: r[row],
                s2: next.clone(),
                done: done[row],
                source: Source::Imaginary,
                behavior_log_prob: None,
            });
            report.added += 1;
            report.branch_lengths[b] += 1;
            states[b] = next;
            if !done[row] {
                next_active.push(b);
            }
        }
        active = next_active;
    }
    Ok(report)
}

/// Frequencies of one-step errors `‖ŝ′ − s′‖₂` using the elites' mean
/// prediction.
pub fn model_error_histogram(model: &EnsembleModel, test: &[Transition], n_bins: usize) -> Result<Histogram> {
    if test.is_empty() {
        return Err(Error::NotEnoughData { have: 0, need: 1 });
    }
    let sd = model.spec.state_dim;
    let ad = model.spec.action_dim;
    let s = Array2::from_shape_fn((test.len(), sd), |(i, j)| test[i].s[j]);
    let a = Array2::from_shape_fn((test.len(), ad), |(i, j)| test[i].a[j]);
    let (pred, _) = model.predict_mean(s.view(), a.view())?;
    let errors: Vec<f64> = test
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.s2.iter()
                .enumerate()
                .map(|(j, v)| (pred[[i, j]] - v).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    nonnegative_histogram(&errors, n_bins)
}
