//! Experiment configuration: one TOML document per experiment.
//!
//! Only the seed list and the output directory may be overridden from the
//! environment (`MBSCHED_SEEDS`, `MBSCHED_OUT`). Neither is part of the
//! content hash, so a run is reproducible from (hash, seeds).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mbsched::controller::PpoConfig;
use mbsched::fvi::{FitNorm, FviConfig};
use mbsched::hyper_mdp::HyperMdpConfig;
use mbsched::mbpo::MbpoConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEEDS_ENV: &str = "MBSCHED_SEEDS";
pub const OUT_ENV: &str = "MBSCHED_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Prefix for experiment ids.
    pub name: String,
    pub env: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Target episodes for `train-mbpo`.
    pub episodes: usize,
    /// `env`, `seed`, `run_id` and `tau` are filled in per run.
    pub mbpo: MbpoConfig,
    pub hyper: HyperMdpConfig,
    pub ppo: PpoConfig,
    pub controller: ControllerSection,
    pub fvi: FviSection,
    pub pbt: PbtSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "exp".into(),
            env: "point_mass_2d".into(),
            seeds: vec![0],
            out_dir: "runs".into(),
            episodes: 5,
            mbpo: MbpoConfig::default(),
            hyper: HyperMdpConfig::default(),
            ppo: PpoConfig::default(),
            controller: ControllerSection::default(),
            fvi: FviSection::default(),
            pbt: PbtSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    /// Hyper-episodes of PPO training per controller.
    pub episodes: usize,
    /// Seeds for the default-MBPO baseline curve.
    pub baseline_seeds: Vec<u64>,
    /// Execute the argmax action at evaluation instead of sampling.
    pub greedy_eval: bool,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            episodes: 40,
            baseline_seeds: (1000..1005).collect(),
            greedy_eval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FviSection {
    pub mdp: String,
    pub betas: Vec<f64>,
    pub n_reals: Vec<usize>,
    pub sigma: f64,
    pub k: usize,
    pub grid: usize,
    pub n_eval: usize,
    pub norm: FitNorm,
    /// Grid resolution of the exact value-iteration reference.
    pub oracle_grid: usize,
    pub bootstrap: usize,
}

impl Default for FviSection {
    fn default() -> Self {
        let base = FviConfig::default();
        Self {
            mdp: "line_world".into(),
            betas: vec![0.05, 0.1, 0.2, 0.4, 0.7, 1.0],
            n_reals: vec![256, 1024, 4096],
            sigma: base.sigma,
            k: base.k,
            grid: base.grid,
            n_eval: base.n_eval,
            norm: base.norm,
            oracle_grid: 512,
            bootstrap: 1000,
        }
    }
}

impl FviSection {
    pub fn base(&self) -> FviConfig {
        FviConfig {
            sigma: self.sigma,
            k: self.k,
            grid: self.grid,
            n_eval: self.n_eval,
            norm: self.norm,
            ..FviConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbtSection {
    pub population: usize,
    pub replace_frac: f64,
    /// Chance that a replaced member is re-initialised (hyperparameters
    /// only) instead of copying a top member.
    pub reinit_prob: f64,
    pub episodes: usize,
}

impl Default for PbtSection {
    fn default() -> Self {
        Self {
            population: 4,
            replace_frac: 0.2,
            reinit_prob: 0.25,
            episodes: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).context("parsing config")?;
        if let Some(mbpo) = raw.get("mbpo").and_then(|v| v.as_table()) {
            for key in ["env", "seed", "run_id", "tau"] {
                if mbpo.contains_key(key) {
                    bail!("mbpo.{key} is derived; set the top-level `env`/`seeds` or `hyper.tau` instead");
                }
            }
        }
        let cfg: RunConfig = raw.try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    /// Apply `MBSCHED_SEEDS` (comma-separated) and `MBSCHED_OUT`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEEDS_ENV) {
            self.seeds = parse_seeds(&s)?;
        }
        if let Ok(o) = std::env::var(OUT_ENV) {
            self.out_dir = o.into();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.episodes == 0 {
            bail!("episodes must be >= 1");
        }
        let mbpo = self.mbpo_for(self.seeds[0]);
        mbpo.validate()?;
        let spec = mbsched::envs::EnvSpec::by_name(&self.env)?;
        self.hyper.validate(spec.horizon)?;
        self.ppo.validate()?;
        if self.pbt.population == 0 || !(0.0..=1.0).contains(&self.pbt.replace_frac) || !(0.0..=1.0).contains(&self.pbt.reinit_prob) {
            bail!("pbt needs population >= 1 and fractions in [0, 1]");
        }
        Ok(())
    }

    /// The MBPO config for one seed.
    pub fn mbpo_for(&self, seed: u64) -> MbpoConfig {
        MbpoConfig {
            env: self.env.clone(),
            seed,
            run_id: format!("{}-s{seed}", self.env),
            tau: self.hyper.tau,
            ..self.mbpo.clone()
        }
    }

    /// sha256 of the canonical JSON form, excluding seeds and output dir.
    /// serde_json maps are ordered, so key order in the TOML is irrelevant.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("seeds");
            m.remove("out_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        format!("{digest:x}")
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().with_context(|| format!("bad seed {t:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("empty seed list");
    }
    Ok(seeds)
}
