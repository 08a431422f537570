//! CSV schemas. Every file starts with the header listed here, even when it
//! has no rows. Changing a column is a schema change: bump `SCHEMA_VERSION`.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use mbsched::mbpo::{EvalRow, IntervalRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const EVAL_COLUMNS: &[&str] = &[
    "run_id",
    "episode",
    "n_real",
    "eval_return",
    "model_holdout_loss",
    "critic_loss_avg",
    "beta",
    "g",
    "k",
    "model_trained",
];
pub const SCHEDULE_COLUMNS: &[&str] = &["run_id", "real_step", "beta", "g", "k", "model_trained"];
pub const SWEEP_COLUMNS: &[&str] = &["beta", "n_real", "sigma", "K", "seed", "discrepancy"];
pub const SWEEP_SUMMARY_COLUMNS: &[&str] = &["n_real", "beta", "mean", "std", "seeds"];
pub const BASELINE_COLUMNS: &[&str] = &["index", "value"];
pub const TRAINING_COLUMNS: &[&str] = &["seed", "index", "episode_seed", "total_reward", "final_eval", "valid"];
pub const REWARD_COLUMNS: &[&str] = &["seed", "index", "reward"];
pub const PHASE_COLUMNS: &[&str] = &["seed", "phase", "mean_return"];
pub const FINAL_COLUMNS: &[&str] = &["seed", "env", "variant", "final_return"];
pub const PBT_COLUMNS: &[&str] = &["seed", "episode", "member", "beta", "g", "k", "eval_return", "action"];
pub const CURVE_COLUMNS: &[&str] = &["run_id", "episode", "n_real", "eval_return"];
pub const IMPORTANCE_COLUMNS: &[&str] = &["variant", "mean_final", "std_final", "n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub run_id: String,
    pub real_step: usize,
    pub beta: f64,
    pub g: usize,
    pub k: usize,
    pub model_trained: bool,
}

impl ScheduleRow {
    pub fn from_interval(run_id: &str, r: &IntervalRecord) -> Self {
        Self {
            run_id: run_id.into(),
            real_step: r.real_step,
            beta: r.beta,
            g: r.g,
            k: r.k,
            model_trained: r.model_trained,
        }
    }

    /// Back to an interval record for replay; evaluation returns are not part
    /// of the schedule.
    pub fn to_interval(&self, index: usize) -> IntervalRecord {
        IntervalRecord {
            index,
            real_step: self.real_step,
            beta: self.beta,
            g: self.g,
            k: self.k,
            model_trained: self.model_trained,
            eval_returns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub n_real: usize,
    pub sigma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub n_real: usize,
    pub beta: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub seed: u64,
    pub index: usize,
    pub episode_seed: u64,
    pub total_reward: f64,
    pub final_eval: Option<f64>,
    pub valid: bool,
}

/// Hyper-reward of one interval of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub seed: u64,
    pub index: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub seed: u64,
    pub phase: usize,
    pub mean_return: f64,
}

/// Final evaluation return of one run under one variant (controller,
/// default, an ablation mode, PBT, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub seed: u64,
    pub env: String,
    pub variant: String,
    pub final_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtRow {
    pub seed: u64,
    pub episode: usize,
    pub member: usize,
    pub beta: f64,
    pub g: usize,
    pub k: usize,
    pub eval_return: f64,
    /// `kept`, `copied:<member>` or `reinit`, applied after this episode.
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub episode: usize,
    pub n_real: usize,
    pub eval_return: f64,
}

impl From<&EvalRow> for CurveRow {
    fn from(r: &EvalRow) -> Self {
        Self {
            run_id: r.run_id.clone(),
            episode: r.episode,
            n_real: r.n_real,
            eval_return: r.eval_return,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub variant: String,
    pub mean_final: f64,
    pub std_final: f64,
    pub n: usize,
}

/// Write `rows` under an explicit header; an empty slice gives a header-only file.
pub fn write_csv<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows, rejecting files whose header differs from `columns`.
pub fn read_csv<T: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    ensure!(
        header == columns,
        "{}: header {header:?} does not match schema {columns:?}",
        path.display()
    );
    r.deserialize().map(|row| row.with_context(|| format!("parsing {}", path.display()))).collect()
}
