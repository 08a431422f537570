//! PPO hyper-controller: factorised categorical heads over the hyper-action,
//! a Monte-Carlo advantage against a default-MBPO baseline curve, and the
//! clipped surrogate update.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hyper_mdp::{
    run_hyper_episode, FeatureSet, HeadMask, HyperAction, HyperEpisode, HyperMdpConfig, HyperPolicy, HyperState,
    NeutralPolicy, HEAD_SIZES,
};
use crate::mbpo::MbpoConfig;
use crate::nn::{Activation, AdamState, Checkpoint, DenseNet, Gradients};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, SeededRng};

pub const HIDDEN: usize = 256;
pub const N_LOGITS: usize = 11;
const HEAD_OFFSETS: [usize; 4] = [0, 3, 5, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPolicy {
    pub net: DenseNet,
    pub mask: HeadMask,
    pub features: FeatureSet,
    /// Hash of the hyper-MDP config the policy was built for.
    pub config_hash: String,
}

/// Hash of the environment name and hyper-MDP config (canonical JSON).
pub fn hyper_config_hash(env: &str, cfg: &HyperMdpConfig) -> String {
    let json = serde_json::to_string(&(env, cfg)).expect("config serialises");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl ControllerPolicy {
    pub fn new(env: &str, cfg: &HyperMdpConfig, rng: &mut SeededRng) -> Self {
        let net = DenseNet::new(
            &[cfg.features.dim(), HIDDEN, N_LOGITS],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        Self {
            net,
            mask: cfg.heads,
            features: cfg.features,
            config_hash: hyper_config_hash(env, cfg),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn check_state(&self, state: &HyperState) -> Result<()> {
        if state.features.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "controller state",
                expected: self.input_dim(),
                got: state.features.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, states: &[&HyperState]) -> Result<Array2<f64>> {
        for s in states {
            self.check_state(s)?;
        }
        let x = Array2::from_shape_fn((states.len(), self.input_dim()), |(i, j)| states[i].features[j]);
        self.net.forward(x.view())
    }

    /// Per-head log-probabilities for one logit row.
    pub fn head_log_probs(logits: ArrayView1<f64>) -> [Vec<f64>; 4] {
        std::array::from_fn(|h| {
            let z: Vec<f64> = (0..HEAD_SIZES[h]).map(|j| logits[HEAD_OFFSETS[h] + j]).collect();
            log_softmax(&z)
        })
    }

    /// Joint log-prob: the sum over active heads only.
    pub fn joint_log_prob(&self, logits: ArrayView1<f64>, action: &HyperAction) -> f64 {
        let lps = Self::head_log_probs(logits);
        self.mask
            .as_array()
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(h, _)| lps[h][action.choices[h]])
            .sum()
    }

    pub fn log_prob(&self, state: &HyperState, action: &HyperAction) -> Result<f64> {
        let z = self.logits(&[state])?;
        Ok(self.joint_log_prob(z.row(0), action))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new("controller");
        ck.push_net("trunk", &self.net);
        ck.meta = serde_json::json!({
            "mask": self.mask,
            "features": self.features,
            "config_hash": self.config_hash,
            "head_sizes": HEAD_SIZES,
            "training": meta,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "controller" {
            return Err(Error::Checkpoint(format!("expected a controller checkpoint, got {}", ck.kind)));
        }
        let field = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing meta.{k}")));
        let net = ck.net("trunk")?;
        let features: FeatureSet = serde_json::from_value(field("features")?)?;
        if net.input_dim() != features.dim() || net.output_dim() != N_LOGITS {
            return Err(Error::Checkpoint("controller trunk shape does not match its head layout".into()));
        }
        Ok(Self {
            net,
            mask: serde_json::from_value(field("mask")?)?,
            features,
            config_hash: serde_json::from_value(field("config_hash")?)?,
        })
    }

    pub fn params_hash(&self) -> String {
        self.to_checkpoint(serde_json::Value::Null).params_hash()
    }
}

/// Sample (or argmax) each active head independently; masked heads are
/// neutral and contribute nothing to the log-prob.
pub fn controller_act(
    policy: &ControllerPolicy,
    state: &HyperState,
    rng: &mut SeededRng,
    greedy: bool,
) -> Result<(HyperAction, f64)> {
    let z = policy.logits(&[state])?;
    let lps = ControllerPolicy::head_log_probs(z.row(0));
    let mut choices = [0usize; 4];
    for h in 0..4 {
        choices[h] = if greedy {
            // First maximum on ties.
            let mut best = 0;
            for j in 1..HEAD_SIZES[h] {
                if lps[h][j] > lps[h][best] {
                    best = j;
                }
            }
            best
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = HEAD_SIZES[h] - 1;
            for (j, lp) in lps[h].iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
    }
    let action = HyperAction::new(choices, policy.mask);
    Ok((action, policy.joint_log_prob(z.row(0), &action)))
}

impl HyperPolicy for ControllerPolicy {
    fn act(&self, state: &HyperState, rng: &mut SeededRng) -> Result<(HyperAction, f64)> {
        controller_act(self, state, rng, false)
    }
}

/// Greedy execution of a trained controller.
#[derive(Debug, Clone, Copy)]
pub struct Greedy<'a>(pub &'a ControllerPolicy);

impl HyperPolicy for Greedy<'_> {
    fn act(&self, state: &HyperState, rng: &mut SeededRng) -> Result<(HyperAction, f64)> {
        controller_act(self.0, state, rng, true)
    }
}

/// Per-index average hyper-reward of default MBPO runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCurve {
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub env: String,
    pub config_hash: String,
}

impl BaselineCurve {
    pub fn from_episodes(episodes: &[HyperEpisode], seeds: &[u64], env: &str, cfg: &HyperMdpConfig) -> Result<Self> {
        let first = episodes.first().ok_or(Error::NotEnoughData { have: 0, need: 1 })?;
        let len = first.steps.len();
        if let Some(bad) = episodes.iter().find(|e| !e.valid || e.steps.len() != len) {
            return Err(Error::Config(format!(
                "baseline run invalid or misaligned: {}",
                bad.error.clone().unwrap_or_else(|| format!("{} vs {len} steps", bad.steps.len()))
            )));
        }
        let values = (0..len)
            .map(|i| episodes.iter().map(|e| e.steps[i].reward).sum::<f64>() / episodes.len() as f64)
            .collect();
        Ok(Self {
            values,
            seeds: seeds.to_vec(),
            env: env.into(),
            config_hash: hyper_config_hash(env, cfg),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Run default MBPO (the neutral controller) for each seed over `episodes`
/// target episodes and average the reward traces.
pub fn build_baseline(
    mbpo: &MbpoConfig,
    cfg: &HyperMdpConfig,
    episodes: usize,
    seeds: &[u64],
    exec: Exec,
) -> Result<BaselineCurve> {
    let runs: Vec<HyperEpisode> = par::map(exec, seeds.to_vec(), |s| {
        run_hyper_episode(&NeutralPolicy, mbpo, cfg, episodes, s)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    BaselineCurve::from_episodes(&runs, seeds, &mbpo.env, cfg)
}

/// Â_t = Σ_{i ≥ t} (R_i − R′_i).
pub fn advantage(rewards: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() != baseline.len() {
        return Err(Error::LengthMismatch(rewards.len(), baseline.len()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i] - baseline[i];
        out[i] = acc;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub lr: f64,
    pub minibatch: usize,
    /// Minibatch updates per collected hyper-episode.
    pub updates_per_episode: usize,
    /// Initial entropy coefficient, decayed linearly to zero over training.
    pub entropy_coef: f64,
    pub standardize_advantages: bool,
    /// Hyper-episodes collected per PPO round.
    pub collect_batch: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            lr: 3e-4,
            minibatch: 64,
            updates_per_episode: 30,
            entropy_coef: 0.01,
            standardize_advantages: true,
            collect_batch: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && self.clip < 1.0
            && self.lr > 0.0
            && self.minibatch > 0
            && self.updates_per_episode > 0
            && self.entropy_coef >= 0.0
            && self.collect_batch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid PPO config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSample {
    pub state: HyperState,
    pub action: HyperAction,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub dropped: usize,
    pub updates: usize,
}

/// Loss `−mean[min(r·Â, clip(r)·Â)] − c·mean[H]` and its gradient over a
/// minibatch. Samples with a non-finite ratio are dropped and counted.
pub fn ppo_loss_grad(
    policy: &ControllerPolicy,
    samples: &[&PpoSample],
    clip: f64,
    entropy_coef: f64,
) -> Result<(Gradients, PpoDiagnostics)> {
    let states: Vec<&HyperState> = samples.iter().map(|s| &s.state).collect();
    let x = Array2::from_shape_fn((samples.len(), policy.input_dim()), |(i, j)| states[i].features[j]);
    let (z, cache) = policy.net.forward_cached(x.view())?;
    let mut up = Array2::<f64>::zeros(z.dim());
    let mut diag = PpoDiagnostics::default();
    let mut used = 0usize;
    let active = policy.mask.as_array();
    for (i, smp) in samples.iter().enumerate() {
        let lps = ControllerPolicy::head_log_probs(z.row(i));
        let lp: f64 = (0..4).filter(|&h| active[h]).map(|h| lps[h][smp.action.choices[h]]).sum();
        let ratio = (lp - smp.old_log_prob).exp();
        if !ratio.is_finite() {
            diag.dropped += 1;
            continue;
        }
        used += 1;
        let a = smp.advantage;
        let clipped = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        let surrogate = (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
        diag.loss -= surrogate;
        diag.mean_ratio += ratio;
        diag.clip_fraction += f64::from(u8::from(clipped));
        // d(−surrogate)/d lp
        let g_lp = if clipped { 0.0 } else { -ratio * a };
        for h in (0..4).filter(|&h| active[h]) {
            let p: Vec<f64> = lps[h].iter().map(|v| v.exp()).collect();
            let ent: f64 = -p.iter().zip(&lps[h]).map(|(pi, li)| pi * li).sum::<f64>();
            diag.entropy += ent;
            diag.loss -= entropy_coef * ent;
            for j in 0..HEAD_SIZES[h] {
                let onehot = f64::from(u8::from(j == smp.action.choices[h]));
                let mut g = 0.0;
                if g_lp != 0.0 {
                    g += g_lp * (onehot - p[j]);
                }
                if entropy_coef != 0.0 {
                    // dH/dz_j = −p_j (log p_j + H)
                    g += entropy_coef * p[j] * (lps[h][j] + ent);
                }
                up[[i, HEAD_OFFSETS[h] + j]] = g;
            }
        }
    }
    if used == 0 {
        return Ok((Gradients::zeros_like(&policy.net), diag));
    }
    let n = used as f64;
    up /= n;
    diag.loss /= n;
    diag.mean_ratio /= n;
    diag.clip_fraction /= n;
    diag.entropy /= n;
    let (grads, _) = policy.net.backward(&cache, up.view())?;
    Ok((grads, diag))
}

fn standardize(samples: &mut [PpoSample]) {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return;
    }
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for s in samples.iter_mut() {
        s.advantage = if sd > 1e-12 { (s.advantage - mean) / sd } else { 0.0 };
    }
}

/// `updates` minibatch Adam steps on a collected batch.
pub fn ppo_update(
    policy: &mut ControllerPolicy,
    adam: &mut AdamState,
    samples: &[PpoSample],
    cfg: &PpoConfig,
    updates: usize,
    entropy_coef: f64,
    rng: &mut SeededRng,
) -> Result<PpoDiagnostics> {
    let mut batch = samples.to_vec();
    if cfg.standardize_advantages {
        standardize(&mut batch);
    }
    let mut total = PpoDiagnostics::default();
    if batch.is_empty() {
        return Ok(total);
    }
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..updates {
        idx.shuffle(rng);
        let mb: Vec<&PpoSample> = idx.iter().take(cfg.minibatch).map(|&i| &batch[i]).collect();
        let (grads, d) = ppo_loss_grad(policy, &mb, cfg.clip, entropy_coef)?;
        adam.step_net(&mut policy.net, &grads)?;
        total.loss += d.loss;
        total.mean_ratio += d.mean_ratio;
        total.clip_fraction += d.clip_fraction;
        total.entropy += d.entropy;
        total.dropped += d.dropped;
        total.updates += 1;
    }
    let u = total.updates as f64;
    total.loss /= u;
    total.mean_ratio /= u;
    total.clip_fraction /= u;
    total.entropy /= u;
    if total.dropped > 0 {
        log::warn!("PPO dropped {} samples with non-finite ratios", total.dropped);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: usize,
    pub seed: u64,
    pub total_reward: f64,
    pub final_eval: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct ControllerTraining {
    pub policy: ControllerPolicy,
    pub history: Vec<EpisodeSummary>,
    pub rounds: Vec<PpoDiagnostics>,
    pub invalid: usize,
    pub updates: usize,
}

impl ControllerTraining {
    /// Mean total hyper-reward per fifth of training (valid episodes only).
    pub fn quintiles(&self) -> Vec<f64> {
        phase_means(&self.history.iter().filter(|e| e.valid).map(|e| e.total_reward).collect::<Vec<_>>(), 5)
    }
}

/// Means of `values` over `phases` consecutive, near-equal chunks.
pub fn phase_means(values: &[f64], phases: usize) -> Vec<f64> {
    let n = values.len();
    (0..phases)
        .filter_map(|p| {
            let (a, b) = (p * n / phases, (p + 1) * n / phases);
            (b > a).then(|| values[a..b].iter().sum::<f64>() / (b - a) as f64)
        })
        .collect()
}

/// Collect hyper-episodes in batches with a frozen policy snapshot, then run
/// `updates_per_episode` PPO minibatch updates per valid episode.
pub fn train_controller(
    mbpo: &MbpoConfig,
    cfg: &HyperMdpConfig,
    ppo: &PpoConfig,
    baseline: &BaselineCurve,
    n_episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<ControllerTraining> {
    ppo.validate()?;
    let expected = cfg.intervals(crate::envs::EnvSpec::by_name(&mbpo.env)?.horizon);
    if baseline.len() != expected {
        return Err(Error::LengthMismatch(baseline.len(), expected));
    }
    let root = SeededRng::new(seed);
    let mut policy = ControllerPolicy::new(&mbpo.env, cfg, &mut root.split("controller_init"));
    let mut adam = AdamState::new(ppo.lr);
    let mut ppo_rng = root.split("ppo");
    let mut out = ControllerTraining {
        policy: policy.clone(),
        history: Vec::new(),
        rounds: Vec::new(),
        invalid: 0,
        updates: 0,
    };
    let mut next = 0;
    while next < n_episodes {
        let b = ppo.collect_batch.min(n_episodes - next);
        let seeds: Vec<(usize, u64)> = (next..next + b).map(|i| (i, derive_seed(seed, &format!("hyper#{i}")))).collect();
        let snapshot = &policy;
        let eps: Vec<(usize, u64, Result<HyperEpisode>)> = par::map(exec, seeds, |(i, s)| {
            (i, s, run_hyper_episode(snapshot, mbpo, cfg, cfg.m, s))
        });
        let mut samples = Vec::new();
        let mut valid_eps = 0;
        for (i, s, ep) in eps {
            let ep = ep?;
            let valid = ep.valid && ep.steps.len() == baseline.len();
            out.history.push(EpisodeSummary {
                index: i,
                seed: s,
                total_reward: ep.total_reward(),
                final_eval: ep.log.rows.last().map(|r| r.eval_return),
                valid,
            });
            if !valid {
                out.invalid += 1;
                continue;
            }
            valid_eps += 1;
            let adv = advantage(&ep.rewards(), &baseline.values)?;
            samples.extend(ep.steps.into_iter().zip(adv).map(|(st, a)| PpoSample {
                state: st.state,
                action: st.action,
                old_log_prob: st.log_prob,
                advantage: a,
            }));
        }
        next += b;
        if valid_eps > 0 {
            let coef = ppo.entropy_coef * (1.0 - (next - b) as f64 / n_episodes as f64);
            let d = ppo_update(
                &mut policy,
                &mut adam,
                &samples,
                ppo,
                ppo.updates_per_episode * valid_eps,
                coef,
                &mut ppo_rng,
            )?;
            out.updates += d.updates;
            log::info!(
                "controller round ending at episode {next}: loss {:.4} clip {:.3} entropy {:.3}",
                d.loss,
                d.clip_fraction,
                d.entropy
            );
            out.rounds.push(d);
        }
    }
    out.policy = policy;
    Ok(out)
}

pub fn save_controller(policy: &ControllerPolicy, path: &Path, meta: serde_json::Value) -> Result<()> {
    policy.to_checkpoint(meta).save(path)
}

#[derive(Debug, Clone)]
pub struct LoadedController {
    pub policy: ControllerPolicy,
    /// Set when the stored config hash differs from the expected one.
    pub transfer_warning: Option<String>,
}

/// Load a controller; a config-hash mismatch is a warning, not an error.
pub fn load_controller(path: &Path, expected_hash: Option<&str>) -> Result<LoadedController> {
    let policy = ControllerPolicy::from_checkpoint(&Checkpoint::load(path)?)?;
    let transfer_warning = expected_hash.filter(|h| *h != policy.config_hash).map(|h| {
        let msg = format!(
            "controller was trained under config {} but is loaded for {}; running as a transfer",
            &policy.config_hash[..12.min(policy.config_hash.len())],
            &h[..12.min(h.len())]
        );
        log::warn!("{msg}");
        msg
    });
    Ok(LoadedController {
        policy,
        transfer_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_sum_by_hand() {
        assert_eq!(advantage(&[1.0, 2.0, 3.0], &[0.0, 1.0, 1.0]).unwrap(), vec![4.0, 3.0, 2.0]);
        assert!(advantage(&[1.0], &[]).is_err());
    }

    #[test]
    fn phases_split_evenly() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(phase_means(&v, 5), vec![0.5, 2.5, 4.5, 6.5, 8.5]);
        assert_eq!(phase_means(&v[..3], 5).len(), 3);
    }
}
