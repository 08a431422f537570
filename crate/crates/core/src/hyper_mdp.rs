//! The hyper-MDP over MBPO training runs.
//!
//! One hyper-episode is an MBPO instance trained from scratch on a budget of
//! `m·H` real steps. Every `τ` real steps the controller observes a
//! normalised [`HyperState`] and emits a factorised [`HyperAction`]; the
//! reward is the normalised evaluation return of target episodes that ended
//! within the interval, minus a penalty when the model was retrained.
//!
//! State features, all in `[0, 1]`:
//!
//! | feature        | transform                                         | sentinel |
//! |----------------|---------------------------------------------------|----------|
//! | n_real_frac    | N_real / (H·m), clamped                           |          |
//! | model_loss     | x/(1+x) of the elite hold-out MSE                 | 1.0      |
//! | critic_loss    | x/(1+x) of the recent critic-loss mean            | 1.0      |
//! | policy_change  | x/(1+x) of mean \|π(a\|s) − π_D(a\|s)\| over W      | 0.0      |
//! | last_return    | (R − R_lo)/(R_hi − R_lo), clamped                 | 0.0      |
//! | beta           | (ln β − ln β_min)/(−ln β_min)                     |          |
//! | g, k           | linear over [1, max]                              |          |

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::mbpo::{Budget, Decision, IntervalRecord, MbpoConfig, MbpoRun, RunLog, ScheduleSource};
use crate::rng::SeededRng;
use crate::sac::SacAgent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub beta: f64,
    pub g: usize,
    pub k: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            beta: 0.05,
            g: 10,
            k: 1,
        }
    }
}

impl HyperParams {
    pub fn clamped(self, cfg: &HyperMdpConfig) -> Self {
        Self {
            beta: self.beta.clamp(cfg.beta_min, 1.0),
            g: self.g.clamp(1, cfg.g_max),
            k: self.k.clamp(1, cfg.k_max),
        }
    }
}

/// Which action heads the controller may use; masked heads act neutrally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadMask {
    pub ratio: bool,
    pub train: bool,
    pub g: bool,
    pub k: bool,
}

impl HeadMask {
    pub const ALL: HeadMask = HeadMask {
        ratio: true,
        train: true,
        g: true,
        k: true,
    };
    pub const NONE: HeadMask = HeadMask {
        ratio: false,
        train: false,
        g: false,
        k: false,
    };

    pub fn as_array(&self) -> [bool; 4] {
        [self.ratio, self.train, self.g, self.k]
    }
}

impl Default for HeadMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Head sizes in order: ratio, train, g, k.
pub const HEAD_SIZES: [usize; 4] = [3, 2, 3, 3];
/// Index of the neutral choice per head.
pub const NEUTRAL: [usize; 4] = [1, 0, 1, 1];

/// Per-head choice indices. Ratio: ×c⁻¹, ×1, ×c. Train: no, yes.
/// G and k: −1, 0, +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HyperAction {
    pub choices: [usize; 4],
    pub mask: HeadMask,
}

impl HyperAction {
    pub fn neutral(mask: HeadMask) -> Self {
        Self { choices: NEUTRAL, mask }
    }

    pub fn new(mut choices: [usize; 4], mask: HeadMask) -> Self {
        for (h, active) in mask.as_array().iter().enumerate() {
            if !active {
                choices[h] = NEUTRAL[h];
            }
            choices[h] = choices[h].min(HEAD_SIZES[h] - 1);
        }
        Self { choices, mask }
    }

    pub fn ratio_op(&self) -> i32 {
        self.choices[0] as i32 - 1
    }

    /// `None` when the train head is masked: the default cadence applies.
    pub fn train_model(&self) -> Option<bool> {
        self.mask.train.then_some(self.choices[1] == 1)
    }

    pub fn g_op(&self) -> i32 {
        self.choices[2] as i32 - 1
    }

    pub fn k_op(&self) -> i32 {
        self.choices[3] as i32 - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Full,
    /// Drops the real-sample count and the model loss.
    NoRealNoModel,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::Full => 8,
            FeatureSet::NoRealNoModel => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperMdpConfig {
    pub tau: usize,
    /// Training-horizon episodes per hyper-episode.
    pub m: usize,
    /// Evaluation-horizon episodes (≥ m).
    pub eval_m: usize,
    pub c: f64,
    pub model_penalty: f64,
    pub beta_min: f64,
    pub g_max: usize,
    pub k_max: usize,
    /// Window of recent real transitions for the policy-change feature.
    pub window: usize,
    pub features: FeatureSet,
    pub heads: HeadMask,
    /// Overrides the environment's return range for feature scaling.
    pub return_range: Option<(f64, f64)>,
}

impl Default for HyperMdpConfig {
    fn default() -> Self {
        Self {
            tau: 50,
            m: 5,
            eval_m: 15,
            c: 1.2,
            model_penalty: 0.1,
            beta_min: 0.01,
            g_max: 20,
            k_max: 10,
            window: 256,
            features: FeatureSet::Full,
            heads: HeadMask::ALL,
            return_range: None,
        }
    }
}

impl HyperMdpConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let ok = self.tau >= 1
            && horizon % self.tau == 0
            && self.m >= 1
            && self.eval_m >= self.m
            && self.c > 1.0
            && self.model_penalty >= 0.0
            && self.beta_min > 0.0
            && self.beta_min < 1.0
            && self.g_max >= 1
            && self.k_max >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyper-MDP config {self:?}")))
        }
    }

    pub fn range(&self, spec: &EnvSpec) -> (f64, f64) {
        self.return_range.unwrap_or(spec.return_range)
    }

    /// Reward normaliser: the larger magnitude of the return range ends.
    pub fn r_norm(&self, spec: &EnvSpec) -> f64 {
        let (lo, hi) = self.range(spec);
        lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE)
    }

    /// Hyper-transitions per training-horizon hyper-episode.
    pub fn intervals(&self, horizon: usize) -> usize {
        self.m * horizon / self.tau
    }
}

/// Raw quantities the features are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub n_real: usize,
    pub model_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_change: f64,
    pub last_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub features: Vec<f64>,
}

fn squash(x: f64) -> f64 {
    let x = x.max(0.0);
    if x.is_finite() {
        x / (1.0 + x)
    } else {
        1.0
    }
}

pub fn beta_feature(beta: f64, beta_min: f64) -> f64 {
    ((beta.ln() - beta_min.ln()) / (-beta_min.ln())).clamp(0.0, 1.0)
}

fn linear_feature(v: usize, max: usize) -> f64 {
    if max <= 1 {
        0.0
    } else {
        ((v as f64 - 1.0) / (max as f64 - 1.0)).clamp(0.0, 1.0)
    }
}

/// Normalised features for a run snapshot and the current hyperparameters.
pub fn features(snap: &RunSnapshot, params: &HyperParams, spec: &EnvSpec, cfg: &HyperMdpConfig) -> HyperState {
    let (lo, hi) = cfg.range(spec);
    let n_real = (snap.n_real as f64 / (spec.horizon * cfg.m) as f64).clamp(0.0, 1.0);
    let model = snap.model_loss.map_or(1.0, squash);
    let critic = snap.critic_loss.map_or(1.0, squash);
    let ret = snap
        .last_return
        .map_or(0.0, |r| if hi > lo { ((r - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 });
    let tail = [
        squash(snap.policy_change),
        ret,
        beta_feature(params.beta, cfg.beta_min),
        linear_feature(params.g, cfg.g_max),
        linear_feature(params.k, cfg.k_max),
    ];
    let mut f = match cfg.features {
        FeatureSet::Full => vec![n_real, model, critic],
        FeatureSet::NoRealNoModel => vec![critic],
    };
    f.extend_from_slice(&tail);
    HyperState { features: f }
}

/// Mean absolute difference between current and behaviour action densities
/// over `recent` (raw, before squashing). Entries without a stored behaviour
/// density are skipped; an empty window gives 0.
pub fn policy_change_raw(recent: &[Transition], agent: &SacAgent) -> Result<f64> {
    let rows: Vec<&Transition> = recent.iter().filter(|t| t.behavior_log_prob.is_some()).collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let sd = rows[0].s.len();
    let ad = rows[0].a.len();
    let s = Array2::from_shape_fn((rows.len(), sd), |(i, j)| rows[i].s[j]);
    let a = Array2::from_shape_fn((rows.len(), ad), |(i, j)| rows[i].a[j]);
    let now = agent.log_prob(s.view(), a.view())?;
    let total: f64 = rows
        .iter()
        .zip(now.iter())
        .map(|(t, &lp)| (lp.exp() - t.behavior_log_prob.unwrap_or(lp).exp()).abs())
        .sum();
    Ok(total / rows.len() as f64)
}

/// ε_π in `[0, 1)`.
pub fn policy_change(recent: &[Transition], agent: &SacAgent) -> Result<f64> {
    Ok(squash(policy_change_raw(recent, agent)?))
}

pub fn apply_action(params: HyperParams, action: &HyperAction, cfg: &HyperMdpConfig) -> HyperParams {
    let mut p = params;
    if action.mask.ratio {
        p.beta *= match action.ratio_op() {
            -1 => 1.0 / cfg.c,
            1 => cfg.c,
            _ => 1.0,
        };
    }
    if action.mask.g {
        p.g = (p.g as i64 + action.g_op() as i64).max(1) as usize;
    }
    if action.mask.k {
        p.k = (p.k as i64 + action.k_op() as i64).max(1) as usize;
    }
    p.clamped(cfg)
}

/// `eval/R_norm` (0 without an evaluation) minus the penalty if the model
/// was retrained in the interval.
pub fn hyper_reward(eval_return: Option<f64>, model_trained: bool, r_norm: f64, cfg: &HyperMdpConfig) -> f64 {
    let base = eval_return.map_or(0.0, |r| r / r_norm);
    if model_trained {
        base - cfg.model_penalty
    } else {
        base
    }
}

/// Anything that maps a hyper-state to an action with its joint log-prob.
pub trait HyperPolicy {
    fn act(&self, state: &HyperState, rng: &mut SeededRng) -> Result<(HyperAction, f64)>;
}

/// Always emits the neutral action with every head masked, so the default
/// cadence and the initial hyperparameters apply throughout.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralPolicy;

impl HyperPolicy for NeutralPolicy {
    fn act(&self, _state: &HyperState, _rng: &mut SeededRng) -> Result<(HyperAction, f64)> {
        Ok((HyperAction::neutral(HeadMask::NONE), 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperStep {
    pub state: HyperState,
    pub action: HyperAction,
    pub log_prob: f64,
    pub reward: f64,
    /// Unnormalised mean evaluation return of the interval, if any.
    pub eval_return: Option<f64>,
    pub model_trained: bool,
    pub params: HyperParams,
}

#[derive(Debug, Clone)]
pub struct HyperEpisode {
    pub steps: Vec<HyperStep>,
    pub log: RunLog,
    /// False when the MBPO instance failed; `steps` is then truncated.
    pub valid: bool,
    pub error: Option<String>,
    pub final_agent_hash: Option<String>,
}

impl HyperEpisode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

struct ControlledSchedule<'a, P: HyperPolicy + ?Sized> {
    policy: &'a P,
    cfg: &'a HyperMdpConfig,
    r_norm: f64,
    rng: SeededRng,
    pending: Vec<HyperStep>,
    done: Vec<HyperStep>,
}

impl<P: HyperPolicy + ?Sized> ScheduleSource for ControlledSchedule<'_, P> {
    fn decide(&mut self, run: &MbpoRun) -> Result<Decision> {
        let state = run.hyper_state(self.cfg)?;
        let (mut action, log_prob) = self.policy.act(&state, &mut self.rng)?;
        action = HyperAction::new(action.choices, action.mask);
        let params = apply_action(run.params, &action, self.cfg);
        self.pending.push(HyperStep {
            state,
            action,
            log_prob,
            reward: 0.0,
            eval_return: None,
            model_trained: false,
            params,
        });
        Ok(Decision {
            params,
            train_model: action.train_model(),
        })
    }

    fn observe(&mut self, record: &IntervalRecord) {
        if let Some(mut step) = self.pending.pop() {
            step.eval_return = record.eval_return();
            step.model_trained = record.model_trained;
            step.reward = hyper_reward(step.eval_return, step.model_trained, self.r_norm, self.cfg);
            self.done.push(step);
        }
    }
}

/// Train one MBPO instance from scratch for `episodes·H` real steps under
/// `policy`. Use `cfg.m` for training and `cfg.eval_m` for evaluation runs.
pub fn run_hyper_episode<P: HyperPolicy + ?Sized>(
    policy: &P,
    mbpo: &MbpoConfig,
    cfg: &HyperMdpConfig,
    episodes: usize,
    seed: u64,
) -> Result<HyperEpisode> {
    let mut mcfg = mbpo.clone();
    mcfg.seed = seed;
    mcfg.tau = cfg.tau;
    let mut run = MbpoRun::new(mcfg)?;
    cfg.validate(run.spec.horizon)?;
    run.params = run.params.clamped(cfg);
    let budget = episodes * run.spec.horizon;
    let mut source = ControlledSchedule {
        policy,
        cfg,
        r_norm: cfg.r_norm(&run.spec),
        rng: SeededRng::new(seed).split("controller"),
        pending: Vec::new(),
        done: Vec::new(),
    };
    let outcome = run.run(&mut source, Budget::RealSteps(budget));
    let (valid, error) = match outcome {
        Ok(()) => (true, None),
        Err(e) => {
            log::warn!("hyper-episode seed {seed} failed: {e}");
            (false, Some(e.to_string()))
        }
    };
    Ok(HyperEpisode {
        steps: source.done,
        final_agent_hash: valid.then(|| run.agent.params_hash()),
        log: run.log,
        valid,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_up_from_default() {
        let cfg = HyperMdpConfig::default();
        let p = apply_action(HyperParams::default(), &HyperAction::new([2, 0, 1, 1], HeadMask::ALL), &cfg);
        assert!((p.beta - 0.06).abs() < 1e-15);
    }

    #[test]
    fn g_and_k_clamped() {
        let cfg = HyperMdpConfig::default();
        let p = HyperParams { beta: 1.0, g: 20, k: 1 };
        let q = apply_action(p, &HyperAction::new([2, 0, 2, 0], HeadMask::ALL), &cfg);
        assert_eq!((q.beta, q.g, q.k), (1.0, 20, 1));
    }

    #[test]
    fn masked_heads_are_neutral() {
        let mask = HeadMask {
            k: false,
            train: false,
            ..HeadMask::ALL
        };
        let a = HyperAction::new([0, 1, 2, 2], mask);
        assert_eq!(a.choices, [0, 0, 2, 1]);
        assert_eq!(a.train_model(), None);
        let p = apply_action(HyperParams::default(), &a, &HyperMdpConfig::default());
        assert_eq!(p.k, 1);
        assert_eq!(p.g, 11);
    }

    #[test]
    fn beta_feature_of_default() {
        // ln 5 / ln 100
        let f = beta_feature(0.05, 0.01);
        assert!((f - 0.349_485_002_168_009_4).abs() < 1e-12);
    }

    #[test]
    fn rewards() {
        let cfg = HyperMdpConfig::default();
        assert_eq!(hyper_reward(None, false, 300.0, &cfg), 0.0);
        assert_eq!(hyper_reward(None, true, 300.0, &cfg), -0.1);
        assert_eq!(hyper_reward(Some(300.0), false, 300.0, &cfg), 1.0);
    }

    #[test]
    fn r_norm_uses_larger_magnitude() {
        let cfg = HyperMdpConfig::default();
        assert_eq!(cfg.r_norm(&EnvSpec::by_name("point_mass_2d").unwrap()), 300.0);
        assert_eq!(cfg.r_norm(&EnvSpec::by_name("cartpole_swingup").unwrap()), 400.0);
    }
}
