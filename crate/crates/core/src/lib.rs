//! Model-based policy optimization with a learned hyperparameter scheduler.

pub mod buffer;
pub mod controller;
pub mod envs;
pub mod error;
pub mod fvi;
pub mod hyper_mdp;
pub mod mbpo;
pub mod nn;
pub mod par;
pub mod rng;
pub mod sac;
pub mod stats;
pub mod world_model;

pub use error::{Error, Result};
pub use rng::SeededRng;
