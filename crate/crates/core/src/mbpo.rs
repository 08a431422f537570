//! The inner MBPO process: real interaction, scheduled model training,
//! branched rollouts and `G` SAC updates per real step.
//!
//! Per real step: consult the schedule when `N_real % τ == 0`, interact once,
//! retrain the ensemble if the interval's decision says so, roll out `F`
//! branches of length `k`, then run `G` updates with real ratio `β`. During
//! warm-up actions are uniform, `β` is forced to 1 and the model is idle.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{ModelBuffer, ReplayBuffer};
use crate::envs::{evaluate_policy, EnvSpec, Source, Transition};
use crate::error::{Error, Result};
use crate::hyper_mdp::{features, policy_change_raw, HyperMdpConfig, HyperParams, HyperState, RunSnapshot};
use crate::par::Exec;
use crate::rng::SeededRng;
use crate::sac::{sample_mixed_batch, Batch, MixedBatchSpec, SacAgent, SacConfig};
use crate::world_model::{generate_rollouts, train_ensemble, EnsembleConfig, EnsembleModel, ModelTrainConfig};

const CRITIC_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MbpoConfig {
    pub env: String,
    pub seed: u64,
    pub run_id: String,
    /// Rollout branches per real step.
    pub branches: usize,
    pub warmup_steps: usize,
    pub env_capacity: usize,
    pub eval_episodes: usize,
    /// Real steps per schedule interval.
    pub tau: usize,
    /// Default cadence: retrain the model every this many intervals.
    pub model_every: usize,
    /// Model buffer retention in model-training generations.
    pub retain_factor: usize,
    pub purge_on_train: bool,
    /// False for model-free runs (SAC baselines).
    pub use_model: bool,
    pub initial: HyperParams,
    pub sac: SacConfig,
    pub ensemble: EnsembleConfig,
    pub model_train: ModelTrainConfig,
}

impl Default for MbpoConfig {
    fn default() -> Self {
        Self {
            env: "point_mass_2d".into(),
            seed: 0,
            run_id: String::new(),
            branches: 20,
            warmup_steps: 500,
            env_capacity: 100_000,
            eval_episodes: 5,
            tau: 50,
            model_every: 2,
            retain_factor: 4,
            purge_on_train: false,
            use_model: true,
            initial: HyperParams::default(),
            sac: SacConfig::default(),
            ensemble: EnsembleConfig::default(),
            model_train: ModelTrainConfig::default(),
        }
    }
}

impl MbpoConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_train.validate()?;
        if self.branches == 0 || self.tau == 0 || self.model_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("branches, tau, model_every and eval_episodes must be >= 1".into()));
        }
        if self.use_model && self.warmup_steps < self.model_train.min_samples() {
            return Err(Error::Config(format!(
                "warmup_steps {} below the model hold-out minimum {}",
                self.warmup_steps,
                self.model_train.min_samples()
            )));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        if self.run_id.is_empty() {
            format!("{}-s{}", self.env, self.seed)
        } else {
            self.run_id.clone()
        }
    }
}

/// One row per end-of-episode evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub episode: usize,
    pub n_real: usize,
    pub eval_return: f64,
    pub model_holdout_loss: Option<f64>,
    pub critic_loss_avg: Option<f64>,
    pub beta: f64,
    pub g: usize,
    pub k: usize,
    /// Model retrained at least once during the episode.
    pub model_trained: bool,
}

/// One row per schedule interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub index: usize,
    pub real_step: usize,
    pub beta: f64,
    pub g: usize,
    pub k: usize,
    pub model_trained: bool,
    /// Evaluation returns of target episodes that ended in the interval.
    pub eval_returns: Vec<f64>,
}

impl IntervalRecord {
    pub fn eval_return(&self) -> Option<f64> {
        if self.eval_returns.is_empty() {
            None
        } else {
            Some(self.eval_returns.iter().sum::<f64>() / self.eval_returns.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub real_step: usize,
    pub episode: usize,
    pub kind: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<EvalRow>,
    pub intervals: Vec<IntervalRecord>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub n_real: usize,
    pub reward: f64,
    pub terminal: bool,
    pub model_trained: bool,
    pub rollouts_added: usize,
    pub updates: usize,
    pub rejected_updates: usize,
}

/// The schedule decision at an interval boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub params: HyperParams,
    /// `None` follows the default cadence.
    pub train_model: Option<bool>,
}

pub trait ScheduleSource {
    fn decide(&mut self, run: &MbpoRun) -> Result<Decision>;

    /// Called once per interval after it closes.
    fn observe(&mut self, _record: &IntervalRecord) {}
}

/// Keeps the current hyperparameters and the default model cadence.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSchedule;

impl ScheduleSource for DefaultSchedule {
    fn decide(&mut self, run: &MbpoRun) -> Result<Decision> {
        Ok(Decision {
            params: run.params,
            train_model: None,
        })
    }
}

/// Replays exported interval rows keyed by their starting real step.
#[derive(Debug, Clone)]
pub struct FixedSchedule {
    pub rows: Vec<IntervalRecord>,
}

impl ScheduleSource for FixedSchedule {
    fn decide(&mut self, run: &MbpoRun) -> Result<Decision> {
        match self.rows.iter().find(|r| r.real_step == run.n_real) {
            Some(r) => Ok(Decision {
                params: HyperParams {
                    beta: r.beta,
                    g: r.g,
                    k: r.k,
                },
                train_model: Some(r.model_trained),
            }),
            None => Ok(Decision {
                params: run.params,
                train_model: None,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Episodes(usize),
    RealSteps(usize),
}

#[derive(Debug, Clone)]
struct Streams {
    env: SeededRng,
    act: SeededRng,
    update: SeededRng,
    model: SeededRng,
    rollout: SeededRng,
    eval: SeededRng,
}

#[derive(Debug, Clone)]
pub struct MbpoRun {
    pub config: MbpoConfig,
    pub spec: EnvSpec,
    pub agent: SacAgent,
    pub model: EnsembleModel,
    pub d_env: ReplayBuffer,
    pub d_model: ModelBuffer,
    pub params: HyperParams,
    pub exec: Exec,
    pub log: RunLog,
    /// Real steps within the current episode.
    pub h: usize,
    pub episode: usize,
    pub n_real: usize,
    pub model_trainings: usize,
    pub updates: usize,
    pub rejected_updates: usize,
    /// Schedule consultations so far.
    pub consultations: usize,
    pub last_eval: Option<f64>,
    state: Vec<f64>,
    critic_window: VecDeque<f64>,
    streams: Streams,
    open: Option<IntervalRecord>,
    train_this_interval: bool,
    trained_this_episode: bool,
    fallback_logged: bool,
    episode_return: f64,
}

impl MbpoRun {
    pub fn new(config: MbpoConfig) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec::by_name(&config.env)?;
        let root = SeededRng::new(config.seed);
        let agent = SacAgent::new(&spec, config.sac.clone(), &mut root.split("agent"))?;
        let model = EnsembleModel::new(&spec, config.ensemble.clone(), &mut root.split("model_init"))?;
        let mut streams = Streams {
            env: root.split("env"),
            act: root.split("act"),
            update: root.split("update"),
            model: root.split("model"),
            rollout: root.split("rollout"),
            eval: root.split("eval"),
        };
        let state = spec.reset(&mut streams.env);
        let cap = config.branches * config.initial.k * config.tau * config.model_every * config.retain_factor;
        Ok(Self {
            d_env: ReplayBuffer::new(config.env_capacity),
            d_model: ModelBuffer::new(cap),
            params: config.initial,
            exec: Exec::default(),
            log: RunLog::default(),
            h: 0,
            episode: 0,
            n_real: 0,
            model_trainings: 0,
            updates: 0,
            rejected_updates: 0,
            consultations: 0,
            last_eval: None,
            state,
            critic_window: VecDeque::with_capacity(CRITIC_WINDOW),
            streams,
            open: None,
            train_this_interval: false,
            trained_this_episode: false,
            fallback_logged: false,
            episode_return: 0.0,
            spec,
            agent,
            model,
            config,
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.n_real < self.config.warmup_steps
    }

    pub fn critic_loss_avg(&self) -> Option<f64> {
        if self.critic_window.is_empty() {
            None
        } else {
            Some(self.critic_window.iter().sum::<f64>() / self.critic_window.len() as f64)
        }
    }

    pub fn model_loss(&self) -> Option<f64> {
        if self.model.is_trained() {
            self.model.elite_holdout_loss()
        } else {
            None
        }
    }

    pub fn snapshot(&self, window: usize) -> Result<RunSnapshot> {
        let recent = self.d_env.recent(window);
        Ok(RunSnapshot {
            n_real: self.n_real,
            model_loss: self.model_loss(),
            critic_loss: self.critic_loss_avg(),
            policy_change: policy_change_raw(&recent, &self.agent)?,
            last_return: self.last_eval,
        })
    }

    pub fn hyper_state(&self, cfg: &HyperMdpConfig) -> Result<HyperState> {
        Ok(features(&self.snapshot(cfg.window)?, &self.params, &self.spec, cfg))
    }

    pub fn interval_index(&self) -> usize {
        self.n_real / self.config.tau
    }

    /// Take over another run's hyperparameters, networks and buffers. The
    /// log, counters and random streams stay this run's own.
    pub fn adopt(&mut self, donor: &MbpoRun) {
        self.params = donor.params;
        self.agent = donor.agent.clone();
        self.model = donor.model.clone();
        self.d_env = donor.d_env.clone();
        self.d_model = donor.d_model.clone();
        self.critic_window = donor.critic_window.clone();
        self.event("adopted", serde_json::json!({"from": donor.config.run_id(), "params": donor.params}));
    }

    fn event(&mut self, kind: &str, detail: serde_json::Value) {
        self.log.events.push(Event {
            real_step: self.n_real,
            episode: self.episode,
            kind: kind.into(),
            detail,
        });
    }

    fn close_interval<S: ScheduleSource + ?Sized>(&mut self, source: &mut S) {
        if let Some(rec) = self.open.take() {
            source.observe(&rec);
            self.log.intervals.push(rec);
        }
    }

    fn consult<S: ScheduleSource + ?Sized>(&mut self, source: &mut S) -> Result<()> {
        self.close_interval(source);
        self.consultations += 1;
        let d = source.decide(self)?;
        let mut params = d.params;
        params.g = params.g.max(1);
        params.k = params.k.max(1);
        params.beta = params.beta.clamp(0.0, 1.0);
        if params != self.params {
            self.event(
                "schedule",
                serde_json::json!({"from": self.params, "to": params, "train_model": d.train_model}),
            );
        }
        self.params = params;
        let default_train = self.interval_index() % self.config.model_every == 0;
        self.train_this_interval = d.train_model.unwrap_or(default_train);
        self.open = Some(IntervalRecord {
            index: self.interval_index(),
            real_step: self.n_real,
            beta: params.beta,
            g: params.g,
            k: params.k,
            model_trained: false,
            eval_returns: Vec::new(),
        });
        Ok(())
    }

    fn train_model(&mut self) -> Result<bool> {
        let data = self.d_env.chronological();
        match train_ensemble(&mut self.model, &data, &self.config.model_train, &mut self.streams.model, self.exec) {
            Ok(report) => {
                self.model_trainings += 1;
                let cap = self.config.branches
                    * self.params.k
                    * self.config.tau
                    * self.config.model_every
                    * self.config.retain_factor;
                if self.config.purge_on_train {
                    self.d_model.clear();
                }
                self.d_model.set_capacity(cap);
                let loss = self.model.elite_holdout_loss();
                self.event(
                    "model_trained",
                    serde_json::json!({"holdout_loss": loss, "epochs": report.epochs, "elites": report.elites}),
                );
                Ok(true)
            }
            Err(Error::NotEnoughData { have, need }) => {
                self.event("model_skipped", serde_json::json!({"have": have, "need": need}));
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    /// One real step: interact, optionally retrain, roll out, update.
    pub fn mbpo_step(&mut self, hyper: HyperParams, train_model_now: bool) -> Result<StepReport> {
        let warm = self.in_warmup();
        let s = self.state.clone();
        let (a, lp) = if warm {
            let a: Vec<f64> = self
                .spec
                .action_low
                .iter()
                .zip(&self.spec.action_high)
                .map(|(&lo, &hi)| self.streams.act.gen_range(lo..=hi))
                .collect();
            // Uniform on [−1, 1]^A in squashed coordinates.
            (a, -(self.spec.action_dim as f64) * std::f64::consts::LN_2)
        } else {
            self.agent.act_with_log_prob(&s, false, &mut self.streams.act)?
        };
        let out = self.spec.step(&s, &a)?;
        self.d_env.push(Transition {
            s,
            a: self.spec.clip_action(&a),
            r: out.reward,
            s2: out.next.clone(),
            done: out.terminal,
            source: Source::Real,
            behavior_log_prob: Some(lp),
        });
        self.n_real += 1;
        self.h += 1;
        self.episode_return += out.reward;
        self.state = out.next;

        let mut report = StepReport {
            n_real: self.n_real,
            reward: out.reward,
            terminal: out.terminal,
            ..StepReport::default()
        };
        let g = hyper.g.max(1);
        if !warm && self.config.use_model {
            if train_model_now && self.train_model()? {
                report.model_trained = true;
            }
            if self.model.is_trained() {
                let rep = generate_rollouts(
                    &self.model,
                    &self.agent,
                    &self.d_env,
                    hyper.k.max(1),
                    self.config.branches,
                    &mut self.streams.rollout,
                    &mut self.d_model,
                )?;
                report.rollouts_added = rep.added;
            }
        }
        let beta = if warm || !self.config.use_model { 1.0 } else { hyper.beta };
        if self.d_env.len() >= self.config.sac.batch_size {
            let spec = MixedBatchSpec {
                batch_size: self.config.sac.batch_size,
                beta,
            };
            for _ in 0..g {
                let mb = sample_mixed_batch(&self.d_env, &self.d_model, spec, &mut self.streams.update)?;
                if mb.fell_back && !self.fallback_logged && beta < 1.0 {
                    self.fallback_logged = true;
                    self.event("all_real_fallback", serde_json::json!({"beta": beta}));
                }
                let batch = Batch::from_transitions(&mb.transitions)?;
                match self.agent.update(&batch, &mut self.streams.update) {
                    Ok(u) => {
                        if self.critic_window.len() == CRITIC_WINDOW {
                            self.critic_window.pop_front();
                        }
                        self.critic_window.push_back(u.critic_loss);
                        report.updates += 1;
                        self.updates += 1;
                    }
                    Err(e @ (Error::NonFiniteGradient { .. } | Error::NonFiniteLoss(_))) => {
                        report.rejected_updates += 1;
                        self.rejected_updates += 1;
                        log::warn!("SAC step rejected: {e}");
                        self.event("update_rejected", serde_json::json!({"error": e.to_string()}));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(report)
    }

    fn end_episode(&mut self) -> Result<f64> {
        let agent = &self.agent;
        let mut dummy = SeededRng::new(0);
        let eval = evaluate_policy(
            &self.spec,
            |s| agent.act(s, true, &mut dummy).expect("state dimension fixed by spec"),
            self.config.eval_episodes,
            &mut self.streams.eval,
        )?;
        self.last_eval = Some(eval);
        if let Some(open) = self.open.as_mut() {
            open.eval_returns.push(eval);
        }
        self.log.rows.push(EvalRow {
            run_id: self.config.run_id(),
            episode: self.episode,
            n_real: self.n_real,
            eval_return: eval,
            model_holdout_loss: self.model_loss(),
            critic_loss_avg: self.critic_loss_avg(),
            beta: self.params.beta,
            g: self.params.g,
            k: self.params.k,
            model_trained: self.trained_this_episode,
        });
        self.episode += 1;
        self.h = 0;
        self.episode_return = 0.0;
        self.trained_this_episode = false;
        self.state = self.spec.reset(&mut self.streams.env);
        Ok(eval)
    }

    /// Run one target episode (until termination, the horizon, or
    /// `max_steps` real steps), consulting `source` on interval boundaries.
    pub fn run_target_episode<S: ScheduleSource + ?Sized>(
        &mut self,
        source: &mut S,
        max_steps: Option<usize>,
    ) -> Result<EpisodeReport> {
        let first = self.consultations;
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            if self.n_real % self.config.tau == 0 {
                self.consult(source)?;
            }
            let train = std::mem::take(&mut self.train_this_interval) && !self.in_warmup();
            let rep = self.mbpo_step(self.params, train)?;
            // A train decision is consumed at its boundary, even in warm-up.
            if rep.model_trained {
                self.trained_this_episode = true;
                if let Some(open) = self.open.as_mut() {
                    open.model_trained = true;
                }
            }
            ret += rep.reward;
            steps += 1;
            let capped = max_steps.is_some_and(|m| steps >= m);
            if rep.terminal || self.h >= self.spec.horizon || capped {
                break;
            }
        }
        let eval = self.end_episode()?;
        Ok(EpisodeReport {
            train_return: ret,
            eval_return: eval,
            steps,
            consultations: self.consultations - first,
        })
    }

    /// Run until the budget is spent, then close the last interval.
    pub fn run<S: ScheduleSource + ?Sized>(&mut self, source: &mut S, budget: Budget) -> Result<()> {
        match budget {
            Budget::Episodes(m) => {
                for _ in 0..m {
                    self.run_target_episode(source, None)?;
                }
            }
            Budget::RealSteps(n) => {
                while self.n_real < n {
                    let left = n - self.n_real;
                    self.run_target_episode(source, Some(left))?;
                }
            }
        }
        self.close_interval(source);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub train_return: f64,
    pub eval_return: f64,
    pub steps: usize,
    pub consultations: usize,
}

/// Plain MBPO with the configured initial hyperparameters for `m` episodes.
pub fn run_default_mbpo(config: &MbpoConfig, m_episodes: usize) -> Result<RunLog> {
    let mut run = MbpoRun::new(config.clone())?;
    run.run(&mut DefaultSchedule, Budget::Episodes(m_episodes))?;
    Ok(run.log)
}

/// Mean undiscounted return of a uniform random policy.
pub fn random_policy_return(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut act = SeededRng::new(seed).split("random_act");
    let mut rng = SeededRng::new(seed).split("random_env");
    evaluate_policy(
        spec,
        |_| {
            spec.action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(&lo, &hi)| act.gen_range(lo..=hi))
                .collect()
        },
        episodes,
        &mut rng,
    )
}
