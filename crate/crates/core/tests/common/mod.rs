#![allow(dead_code)]

use mbsched::mbpo::MbpoConfig;
use mbsched::sac::SacConfig;
use mbsched::world_model::{EnsembleConfig, ModelTrainConfig};

/// Small nets and short warm-up so a 200-step episode takes well under a second.
pub fn fast_config(env: &str, seed: u64) -> MbpoConfig {
    MbpoConfig {
        env: env.into(),
        seed,
        branches: 4,
        warmup_steps: 100,
        eval_episodes: 1,
        sac: SacConfig {
            hidden: vec![16, 16],
            batch_size: 32,
            ..SacConfig::default()
        },
        ensemble: EnsembleConfig {
            members: 3,
            elites: 2,
            hidden: vec![16, 16],
            known_reward: false,
        },
        model_train: ModelTrainConfig {
            max_epochs: 3,
            batch_size: 64,
            ..ModelTrainConfig::default()
        },
        initial: mbsched::hyper_mdp::HyperParams { beta: 0.05, g: 2, k: 1 },
        ..MbpoConfig::default()
    }
}
