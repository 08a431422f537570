//! Soft Actor-Critic with twin critics, polyak-averaged targets and
//! real/imaginary mixed minibatches.
//!
//! Critics see env-scale actions. The actor emits `(mean, log_std)` for a
//! tanh-squashed Gaussian in `[−1, 1]^A`, which is then mapped onto the
//! action box.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crate::buffer::ReplayBuffer;
use crate::buffer::ModelBuffer;
use crate::envs::{EnvSpec, Policy, Source, Transition};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::dense::{Activation, DenseNet, Gradients};
use crate::nn::gaussian::{head_with_noise, log_prob_of_squashed, HeadSample};
use crate::nn::AdamState;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub twin_critics: bool,
    pub auto_alpha: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            alpha: 0.2,
            gamma: 0.99,
            polyak: 0.995,
            batch_size: 256,
            lr: 3e-4,
            twin_critics: true,
            auto_alpha: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub spec: EnvSpec,
    pub config: SacConfig,
    pub actor: DenseNet,
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub q1_target: DenseNet,
    pub q2_target: DenseNet,
    pub alpha: f64,
    pub polyak: f64,
    adam_actor: AdamState,
    adam_q1: AdamState,
    adam_q2: AdamState,
    log_alpha_adam: AdamState,
}

/// Column-stacked minibatch. `a` is env-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s2: Array2<f64>,
    pub done: Array1<f64>,
    pub n_real: usize,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition]) -> Result<Self> {
        let first = ts.first().ok_or(Error::EmptyBuffers)?;
        let (sd, ad, n) = (first.s.len(), first.a.len(), ts.len());
        Ok(Self {
            s: Array2::from_shape_fn((n, sd), |(i, j)| ts[i].s[j]),
            a: Array2::from_shape_fn((n, ad), |(i, j)| ts[i].a[j]),
            r: ts.iter().map(|t| t.r).collect(),
            s2: Array2::from_shape_fn((n, sd), |(i, j)| ts[i].s2[j]),
            done: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
            n_real: ts.iter().filter(|t| t.source == Source::Real).count(),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedBatchSpec {
    pub batch_size: usize,
    pub beta: f64,
}

impl MixedBatchSpec {
    pub fn n_real(&self) -> usize {
        ((self.beta * self.batch_size as f64).round().max(0.0) as usize).min(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub transitions: Vec<Transition>,
    pub n_real: usize,
    /// True when β < 1 was requested but D_model was empty.
    pub fell_back: bool,
}

/// `round(βB)` real and the rest imaginary, each uniform with replacement.
/// An empty side is filled from the other.
pub fn sample_mixed_batch(
    d_env: &ReplayBuffer,
    d_model: &ModelBuffer,
    spec: MixedBatchSpec,
    rng: &mut SeededRng,
) -> Result<MixedBatch> {
    if spec.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if d_env.is_empty() && d_model.is_empty() {
        return Err(Error::EmptyBuffers);
    }
    let mut n_real = spec.n_real();
    let mut fell_back = false;
    if d_model.is_empty() && n_real < spec.batch_size {
        log::debug!("model buffer empty; batch falls back to real data");
        n_real = spec.batch_size;
        fell_back = true;
    }
    if d_env.is_empty() {
        n_real = 0;
    }
    let mut transitions = Vec::with_capacity(spec.batch_size);
    for _ in 0..n_real {
        transitions.push(d_env.sample(rng).expect("non-empty").clone());
    }
    for _ in n_real..spec.batch_size {
        transitions.push(d_model.inner().sample(rng).expect("non-empty").clone());
    }
    Ok(MixedBatch {
        transitions,
        n_real,
        fell_back,
    })
}

#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub loss: f64,
    pub q1: Gradients,
    pub q2: Gradients,
}

#[derive(Debug, Clone)]
pub struct ActorGrads {
    pub loss: f64,
    pub actor: Gradients,
    pub mean_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
}

fn sa(s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[s.view(), a.view()]).expect("matching rows")
}

impl SacAgent {
    pub fn new(spec: &EnvSpec, config: SacConfig, rng: &mut SeededRng) -> Result<Self> {
        if config.alpha <= 0.0 || !(0.0..=1.0).contains(&config.polyak) || config.batch_size == 0 {
            return Err(Error::Config(format!("invalid SAC config {config:?}")));
        }
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let mut sizes = vec![sd];
        sizes.extend(&config.hidden);
        sizes.push(2 * ad);
        let actor = DenseNet::new(&sizes, Activation::Relu, Activation::Identity, &mut rng.split("actor"));
        let mut qs = vec![sd + ad];
        qs.extend(&config.hidden);
        qs.push(1);
        let q1 = DenseNet::new(&qs, Activation::Relu, Activation::Identity, &mut rng.split("q1"));
        let q2 = DenseNet::new(&qs, Activation::Relu, Activation::Identity, &mut rng.split("q2"));
        Ok(Self {
            spec: spec.clone(),
            alpha: config.alpha,
            polyak: config.polyak,
            adam_actor: AdamState::new(config.lr),
            adam_q1: AdamState::new(config.lr),
            adam_q2: AdamState::new(config.lr),
            log_alpha_adam: AdamState::new(config.lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            config,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn half_range(&self) -> Vec<f64> {
        self.spec
            .action_low
            .iter()
            .zip(&self.spec.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }

    fn to_env(&self, squashed: &Array2<f64>) -> Array2<f64> {
        let mut out = squashed.clone();
        for mut row in out.rows_mut() {
            let scaled = self.spec.scale_action(&row.to_vec());
            row.assign(&Array1::from(scaled));
        }
        out
    }

    /// Actor head for a batch of states under the supplied noise.
    pub fn head(&self, s: ArrayView2<f64>, noise: Array2<f64>) -> Result<(HeadSample, crate::nn::ForwardCache)> {
        let ad = self.action_dim();
        let (out, cache) = self.actor.forward_cached(s)?;
        let head = head_with_noise(out.slice(s![.., ..ad]), out.slice(s![.., ad..]), noise);
        Ok((head, cache))
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut SeededRng) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.action_dim()), |_| rng.sample(StandardNormal))
    }

    /// Env-scale actions and their squashed-space log-densities.
    pub fn act_batch_with_log_prob(
        &self,
        s: ArrayView2<f64>,
        deterministic: bool,
        rng: &mut SeededRng,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let noise = if deterministic {
            Array2::zeros((s.nrows(), self.action_dim()))
        } else {
            self.draw_noise(s.nrows(), rng)
        };
        let (head, _) = self.head(s, noise)?;
        Ok((self.to_env(&head.squashed), head.log_prob))
    }

    pub fn act(&self, s: &[f64], deterministic: bool, rng: &mut SeededRng) -> Result<Vec<f64>> {
        Ok(self.act_with_log_prob(s, deterministic, rng)?.0)
    }

    pub fn act_with_log_prob(&self, s: &[f64], deterministic: bool, rng: &mut SeededRng) -> Result<(Vec<f64>, f64)> {
        let view = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Config(e.to_string()))?;
        let (a, lp) = self.act_batch_with_log_prob(view, deterministic, rng)?;
        Ok((a.row(0).to_vec(), lp[0]))
    }

    /// Current log-density of env-scale actions.
    pub fn log_prob(&self, s: ArrayView2<f64>, a_env: ArrayView2<f64>) -> Result<Array1<f64>> {
        let ad = self.action_dim();
        let out = self.actor.forward(s)?;
        Ok((0..s.nrows())
            .map(|i| {
                let u = self.spec.unscale_action(&a_env.row(i).to_vec());
                let row = out.row(i);
                log_prob_of_squashed(
                    &row.slice(s![..ad]).to_vec(),
                    &row.slice(s![ad..]).to_vec(),
                    &u,
                )
            })
            .collect())
    }

    pub fn q_values(&self, s: ArrayView2<f64>, a_env: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = sa(s, a_env);
        let q1 = self.q1.forward(x.view())?.column(0).to_owned();
        let q2 = if self.config.twin_critics {
            self.q2.forward(x.view())?.column(0).to_owned()
        } else {
            q1.clone()
        };
        Ok((q1, q2))
    }

    /// Bellman targets `r + γ(1 − done)(min Q̂(s′, a′) − α log π(a′|s′))` with
    /// `a′` drawn from the current actor under `noise_next`.
    pub fn critic_targets(&self, batch: &Batch, gamma: f64, noise_next: Array2<f64>) -> Result<Array1<f64>> {
        let (head, _) = self.head(batch.s2.view(), noise_next)?;
        let a2 = self.to_env(&head.squashed);
        let x2 = sa(batch.s2.view(), a2.view());
        let t1 = self.q1_target.forward(x2.view())?;
        let t2 = if self.config.twin_critics {
            self.q2_target.forward(x2.view())?
        } else {
            t1.clone()
        };
        Ok((0..batch.len())
            .map(|i| {
                let v = t1[[i, 0]].min(t2[[i, 0]]) - self.alpha * head.log_prob[i];
                batch.r[i] + gamma * (1.0 - batch.done[i]) * v
            })
            .collect())
    }

    /// `mean ½(Q₁ − y)² + mean ½(Q₂ − y)²` (one term without twin critics)
    /// and its gradients; targets are constants.
    pub fn critic_loss_grad(&self, batch: &Batch, gamma: f64, noise_next: Array2<f64>) -> Result<CriticGrads> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffers);
        }
        let y = self.critic_targets(batch, gamma, noise_next)?;
        let x = sa(batch.s.view(), batch.a.view());
        let b = batch.len() as f64;
        let one = |net: &DenseNet| -> Result<(f64, Gradients)> {
            let (q, cache) = net.forward_cached(x.view())?;
            let diff = &q.column(0) - &y;
            let loss = 0.5 * diff.mapv(|d| d * d).sum() / b;
            let up = (diff / b).insert_axis(Axis(1));
            Ok((loss, net.backward(&cache, up.view())?.0))
        };
        let (l1, g1) = one(&self.q1)?;
        let (l2, g2) = if self.config.twin_critics {
            one(&self.q2)?
        } else {
            (0.0, Gradients::zeros_like(&self.q2))
        };
        let loss = l1 + l2;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("critic"));
        }
        Ok(CriticGrads { loss, q1: g1, q2: g2 })
    }

    /// `mean(α log π(ã|s) − min Q(s, ã))` with reparameterised `ã`.
    pub fn actor_loss_grad(&self, batch: &Batch, noise: Array2<f64>) -> Result<ActorGrads> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffers);
        }
        let sd = self.spec.state_dim;
        let b = batch.len() as f64;
        let (head, cache) = self.head(batch.s.view(), noise)?;
        let a = self.to_env(&head.squashed);
        let x = sa(batch.s.view(), a.view());
        let (q1, c1) = self.q1.forward_cached(x.view())?;
        let (q2, c2) = if self.config.twin_critics {
            let (q, c) = self.q2.forward_cached(x.view())?;
            (q, Some(c))
        } else {
            (q1.clone(), None)
        };
        let mut up1 = Array2::zeros((batch.len(), 1));
        let mut up2 = Array2::zeros((batch.len(), 1));
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let use_first = c2.is_none() || q1[[i, 0]] <= q2[[i, 0]];
            let q = if use_first { q1[[i, 0]] } else { q2[[i, 0]] };
            loss += self.alpha * head.log_prob[i] - q;
            if use_first {
                up1[[i, 0]] = -1.0 / b;
            } else {
                up2[[i, 0]] = -1.0 / b;
            }
        }
        loss /= b;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("actor"));
        }
        let mut d_x = self.q1.backward(&c1, up1.view())?.1;
        if let Some(c2) = &c2 {
            d_x += &self.q2.backward(c2, up2.view())?.1;
        }
        let half = self.half_range();
        let mut d_squashed = d_x.slice(s![.., sd..]).to_owned();
        for mut row in d_squashed.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= half[j];
            }
        }
        let d_lp = Array1::from_elem(batch.len(), self.alpha / b);
        let (d_mean, d_ls) = head.backward(d_squashed.view(), &d_lp);
        let up = concatenate(Axis(1), &[d_mean.view(), d_ls.view()]).expect("same rows");
        let actor = self.actor.backward(&cache, up.view())?.0;
        Ok(ActorGrads {
            loss,
            actor,
            mean_log_prob: head.log_prob.mean().unwrap_or(0.0),
        })
    }

    pub fn critic_loss(&self, batch: &Batch, rng: &mut SeededRng) -> Result<f64> {
        let noise = self.draw_noise(batch.len(), rng);
        Ok(self.critic_loss_grad(batch, self.config.gamma, noise)?.loss)
    }

    pub fn actor_loss(&self, batch: &Batch, rng: &mut SeededRng) -> Result<f64> {
        let noise = self.draw_noise(batch.len(), rng);
        Ok(self.actor_loss_grad(batch, noise)?.loss)
    }

    /// Critic step, actor step (against the updated critics), optional α
    /// step, then polyak target averaging.
    pub fn update(&mut self, batch: &Batch, rng: &mut SeededRng) -> Result<UpdateReport> {
        let noise_next = self.draw_noise(batch.len(), rng);
        let c = self.critic_loss_grad(batch, self.config.gamma, noise_next)?;
        self.adam_q1.step_net(&mut self.q1, &c.q1)?;
        if self.config.twin_critics {
            self.adam_q2.step_net(&mut self.q2, &c.q2)?;
        }
        let noise = self.draw_noise(batch.len(), rng);
        let a = self.actor_loss_grad(batch, noise)?;
        self.adam_actor.step_net(&mut self.actor, &a.actor)?;
        if self.config.auto_alpha {
            let target_entropy = -(self.action_dim() as f64);
            let mut log_alpha = [self.alpha.ln()];
            let g = [-(a.mean_log_prob + target_entropy)];
            self.log_alpha_adam.step(vec![&mut log_alpha], &[&g])?;
            self.alpha = log_alpha[0].exp();
        }
        self.q1_target.polyak_from(&self.q1, self.polyak);
        self.q2_target.polyak_from(&self.q2, self.polyak);
        Ok(UpdateReport {
            critic_loss: c.loss,
            actor_loss: a.loss,
            entropy: -a.mean_log_prob,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("sac");
        ck.push_net("actor", &self.actor);
        ck.push_net("q1", &self.q1);
        ck.push_net("q2", &self.q2);
        ck.push_net("q1_target", &self.q1_target);
        ck.push_net("q2_target", &self.q2_target);
        ck.meta = serde_json::json!({
            "env": self.spec.name(),
            "alpha": self.alpha,
            "polyak": self.polyak,
            "config": self.config,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, spec: &EnvSpec) -> Result<Self> {
        if ck.kind != "sac" {
            return Err(Error::Checkpoint(format!("expected sac, found {}", ck.kind)));
        }
        let get = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing meta {k}")));
        let config: SacConfig = serde_json::from_value(get("config")?)?;
        let mut agent = Self::new(spec, config, &mut SeededRng::new(0))?;
        agent.actor = ck.net("actor")?;
        agent.q1 = ck.net("q1")?;
        agent.q2 = ck.net("q2")?;
        agent.q1_target = ck.net("q1_target")?;
        agent.q2_target = ck.net("q2_target")?;
        agent.alpha = serde_json::from_value(get("alpha")?)?;
        agent.polyak = serde_json::from_value(get("polyak")?)?;
        if agent.actor.input_dim() != spec.state_dim || agent.q1.input_dim() != spec.state_dim + spec.action_dim {
            return Err(Error::Checkpoint("agent dimensions do not match environment".into()));
        }
        Ok(agent)
    }

    pub fn params_hash(&self) -> String {
        self.to_checkpoint().params_hash()
    }
}

impl Policy for SacAgent {
    fn act_batch(&self, states: ArrayView2<f64>, rng: &mut SeededRng) -> Result<Array2<f64>> {
        Ok(self.act_batch_with_log_prob(states, false, rng)?.0)
    }
}

/// One SAC update on `batch`; returns the loss values.
pub fn sac_update(agent: &mut SacAgent, batch: &Batch, rng: &mut SeededRng) -> Result<UpdateReport> {
    agent.update(batch, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(src: Source) -> Transition {
        Transition {
            s: vec![0.0],
            a: vec![0.0],
            r: 0.0,
            s2: vec![0.0],
            done: false,
            source: src,
            behavior_log_prob: None,
        }
    }

    #[test]
    fn n_real_rounds_and_clamps() {
        assert_eq!(MixedBatchSpec { batch_size: 100, beta: 0.05 }.n_real(), 5);
        assert_eq!(MixedBatchSpec { batch_size: 10, beta: 1.0 }.n_real(), 10);
        assert_eq!(MixedBatchSpec { batch_size: 10, beta: 1.7 }.n_real(), 10);
        assert_eq!(MixedBatchSpec { batch_size: 3, beta: 0.5 }.n_real(), 2);
    }

    #[test]
    fn empty_model_buffer_falls_back_to_real() {
        let mut env = ReplayBuffer::new(4);
        env.push(tr(Source::Real));
        let model = ModelBuffer::new(4);
        let mut rng = SeededRng::new(0);
        let b = sample_mixed_batch(&env, &model, MixedBatchSpec { batch_size: 8, beta: 0.1 }, &mut rng).unwrap();
        assert!(b.fell_back);
        assert_eq!(b.n_real, 8);
    }

    #[test]
    fn both_empty_is_error() {
        let mut rng = SeededRng::new(0);
        let r = sample_mixed_batch(
            &ReplayBuffer::new(1),
            &ModelBuffer::new(1),
            MixedBatchSpec { batch_size: 1, beta: 0.5 },
            &mut rng,
        );
        assert!(matches!(r, Err(Error::EmptyBuffers)));
    }
}
