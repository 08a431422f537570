//! Deterministic toy continuous-control tasks.
//!
//! All tasks integrate with semi-implicit Euler at `DT = 0.05` and compute the
//! reward from the pre-step state and the clipped action.
//!
//! | task               | state                 | action      | reward                                         | termination              |
//! |--------------------|-----------------------|-------------|------------------------------------------------|--------------------------|
//! | `pendulum`         | (cos θ, sin θ, θ̇)     | [−2, 2]     | −(θ² + 0.1 θ̇² + 0.001 a²), θ wrapped to [−π, π] | none                     |
//! | `point_mass_2d`    | (x, y, ẋ, ẏ)          | [−1, 1]²    | −‖p − g‖ − 0.001‖a‖²                            | ‖p′ − g‖ < 0.05          |
//! | `cartpole_swingup` | (x, ẋ, θ, θ̇)          | [−1, 1]     | cos θ − 0.01 ẋ² − 0.001 a² + 1                  | \|x′\| > 2.4 or \|θ′\| > 3π |
//!
//! `idle` is a zero-reward integrator `s′ᵢ = clamp(sᵢ + DT·a_(i mod A), −1, 1)`
//! used by plumbing tests; [`EnvSpec::idle`] builds it at any dimension.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DT: f64 = 0.05;
pub const POINT_MASS_GOAL: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    PointMass2d,
    CartpoleSwingup,
    Idle,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointMass2d => "point_mass_2d",
            EnvKind::CartpoleSwingup => "cartpole_swingup",
            EnvKind::Idle => "idle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(EnvKind::Pendulum),
            "point_mass_2d" | "pointmass2d" => Ok(EnvKind::PointMass2d),
            "cartpole_swingup" => Ok(EnvKind::CartpoleSwingup),
            "idle" => Ok(EnvKind::Idle),
            other => Err(Error::Config(format!("unknown environment {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// Typical (worst, best) episode return, used for feature and reward scaling.
    pub return_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Imaginary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s2: Vec<f64>,
    /// True termination only; time-limit truncation is not `done`.
    pub done: bool,
    pub source: Source,
    /// Behaviour-policy log-density of the squashed action at collection time.
    pub behavior_log_prob: Option<f64>,
}

/// A batched stochastic policy returning env-scale actions, one row per state.
pub trait Policy {
    fn act_batch(&self, states: ArrayView2<f64>, rng: &mut SeededRng) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let (sd, ad, lo, hi, r_max, range) = match kind {
            EnvKind::Pendulum => (3, 1, -2.0, 2.0, PI * PI + 6.4 + 0.004, (-1600.0, 0.0)),
            EnvKind::PointMass2d => (4, 2, -1.0, 1.0, 3.0, (-300.0, 0.0)),
            EnvKind::CartpoleSwingup => (4, 1, -1.0, 1.0, 2.1, (0.0, 400.0)),
            EnvKind::Idle => (1, 1, -1.0, 1.0, 1.0, (-1.0, 1.0)),
        };
        Self {
            kind,
            state_dim: sd,
            action_dim: ad,
            action_low: vec![lo; ad],
            action_high: vec![hi; ad],
            horizon: 200,
            gamma: 0.99,
            r_max,
            return_range: range,
        }
    }

    pub fn idle(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
            ..Self::new(EnvKind::Idle)
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(EnvKind::from_name(name)?))
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&lo, &hi))| x.clamp(lo, hi))
            .collect()
    }

    /// Maps a squashed action in `[−1, 1]` onto the action box.
    pub fn scale_action(&self, squashed: &[f64]) -> Vec<f64> {
        squashed
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&u, (&lo, &hi))| 0.5 * (hi + lo) + 0.5 * (hi - lo) * u)
            .collect()
    }

    pub fn unscale_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&lo, &hi))| (2.0 * x - (hi + lo)) / (hi - lo))
            .collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => {
                let th: f64 = rng.gen_range(-PI..=PI);
                let thdot: f64 = rng.gen_range(-1.0..=1.0);
                vec![th.cos(), th.sin(), thdot]
            }
            EnvKind::PointMass2d => vec![
                rng.gen_range(-0.1..=0.1),
                rng.gen_range(-0.1..=0.1),
                0.0,
                0.0,
            ],
            EnvKind::CartpoleSwingup => vec![
                rng.gen_range(-0.05..=0.05),
                rng.gen_range(-0.05..=0.05),
                PI + rng.gen_range(-0.05..=0.05),
                rng.gen_range(-0.05..=0.05),
            ],
            EnvKind::Idle => (0..self.state_dim).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
        }
    }

    /// Reward for taking (clipped) action `a` in state `s`.
    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let a = self.clip_action(a);
        let a2: f64 = a.iter().map(|x| x * x).sum();
        match self.kind {
            EnvKind::Pendulum => {
                let th = s[1].atan2(s[0]);
                -(th * th + 0.1 * s[2] * s[2] + 0.001 * a2)
            }
            EnvKind::PointMass2d => {
                let dx = s[0] - POINT_MASS_GOAL[0];
                let dy = s[1] - POINT_MASS_GOAL[1];
                -(dx * dx + dy * dy).sqrt() - 0.001 * a2
            }
            EnvKind::CartpoleSwingup => s[2].cos() - 0.01 * s[1] * s[1] - 0.001 * a2 + 1.0,
            EnvKind::Idle => 0.0,
        }
    }

    pub fn is_terminal(&self, s: &[f64]) -> bool {
        match self.kind {
            EnvKind::Pendulum | EnvKind::Idle => false,
            EnvKind::PointMass2d => {
                let dx = s[0] - POINT_MASS_GOAL[0];
                let dy = s[1] - POINT_MASS_GOAL[1];
                (dx * dx + dy * dy).sqrt() < 0.05
            }
            EnvKind::CartpoleSwingup => s[0].abs() > 2.4 || s[2].abs() > 3.0 * PI,
        }
    }

    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<StepOutcome> {
        if s.len() != self.state_dim {
            return Err(Error::Dimension {
                context: "env state",
                expected: self.state_dim,
                got: s.len(),
            });
        }
        if a.len() != self.action_dim {
            return Err(Error::Dimension {
                context: "env action",
                expected: self.action_dim,
                got: a.len(),
            });
        }
        let u = self.clip_action(a);
        let reward = self.reward(s, &u);
        let next = match self.kind {
            EnvKind::Pendulum => {
                let th = s[1].atan2(s[0]);
                let thacc = 15.0 * th.sin() + 3.0 * u[0];
                let thdot = (s[2] + thacc * DT).clamp(-8.0, 8.0);
                let th2 = th + thdot * DT;
                vec![th2.cos(), th2.sin(), thdot]
            }
            EnvKind::PointMass2d => {
                let mut n = vec![0.0; 4];
                for d in 0..2 {
                    let v = (s[2 + d] + DT * (u[d] - 0.5 * s[2 + d])).clamp(-2.0, 2.0);
                    n[2 + d] = v;
                    n[d] = (s[d] + DT * v).clamp(-1.5, 1.5);
                }
                n
            }
            EnvKind::CartpoleSwingup => {
                const G: f64 = 9.8;
                const M_CART: f64 = 1.0;
                const M_POLE: f64 = 0.1;
                const L: f64 = 0.5;
                let total = M_CART + M_POLE;
                let force = 10.0 * u[0];
                let (x, xdot, th, thdot) = (s[0], s[1], s[2], s[3]);
                let (sin, cos) = th.sin_cos();
                let temp = (force + M_POLE * L * thdot * thdot * sin) / total;
                let thacc = (G * sin - cos * temp) / (L * (4.0 / 3.0 - M_POLE * cos * cos / total));
                let xacc = temp - M_POLE * L * thacc * cos / total;
                let xdot2 = (xdot + DT * xacc).clamp(-10.0, 10.0);
                let thdot2 = (thdot + DT * thacc).clamp(-20.0, 20.0);
                vec![x + DT * xdot2, xdot2, th + DT * thdot2, thdot2]
            }
            EnvKind::Idle => (0..self.state_dim)
                .map(|i| (s[i] + DT * u[i % self.action_dim]).clamp(-1.0, 1.0))
                .collect(),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(next));
        }
        let terminal = self.is_terminal(&next);
        Ok(StepOutcome {
            next,
            reward,
            terminal,
        })
    }

    /// Box from which uniformly sampled states stay within the documented
    /// dynamics ranges (used for reward-bound checks).
    pub fn state_box(&self) -> Vec<(f64, f64)> {
        match self.kind {
            EnvKind::Pendulum => vec![(-1.0, 1.0), (-1.0, 1.0), (-8.0, 8.0)],
            EnvKind::PointMass2d => vec![(-1.5, 1.5), (-1.5, 1.5), (-2.0, 2.0), (-2.0, 2.0)],
            EnvKind::CartpoleSwingup => {
                vec![(-2.4, 2.4), (-10.0, 10.0), (-3.0 * PI, 3.0 * PI), (-20.0, 20.0)]
            }
            EnvKind::Idle => vec![(-1.0, 1.0); self.state_dim],
        }
    }
}

/// Mean undiscounted return over `n_episodes`, each capped at the horizon.
pub fn evaluate_policy<R, P>(spec: &EnvSpec, mut policy: P, n_episodes: usize, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    P: FnMut(&[f64]) -> Vec<f64>,
{
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_episodes {
        let mut s = spec.reset(rng);
        for _ in 0..spec.horizon {
            let a = policy(&s);
            let out = spec.step(&s, &a)?;
            total += out.reward;
            s = out.next;
            if out.terminal {
                break;
            }
        }
    }
    Ok(total / n_episodes as f64)
}
