use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mbsched::par::Exec;
use mbsched_cli::commands::{self, AblateMode, MbpoMode, Outcome, Session};
use mbsched_cli::config::{RunConfig, OUT_ENV};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mbsched", version, about = "Model-based RL schedule experiments")]
struct Cli {
    /// Run seeds one after another instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Default,
    Sac1,
    Sac20,
    Schedule,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    #[value(name = "R")]
    R,
    #[value(name = "M")]
    M,
    #[value(name = "P")]
    P,
    #[value(name = "L")]
    L,
    #[value(name = "SA")]
    Sa,
}

#[derive(Subcommand)]
enum Command {
    /// β-mixture fitted value iteration sweep on a toy MDP.
    FviSweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// MBPO or SAC runs under a fixed schedule.
    TrainMbpo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        mode: TrainMode,
        /// schedule.csv exported by an earlier run (mode `schedule`).
        #[arg(long)]
        schedule_file: Option<PathBuf>,
        /// Run to replay when the schedule file holds several.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Average hyper-reward curve of default MBPO over the config seeds.
    BuildBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// PPO training of one controller per seed.
    TrainController {
        #[arg(long)]
        config: PathBuf,
        /// baseline.json or the build-baseline experiment directory.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Controller-scheduled MBPO against default MBPO on the config seeds.
    EvalController {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint files or train-controller experiment directories.
        #[arg(long, required = true)]
        controller: Vec<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Schedule a single hyperparameter (R, M, P, L) or retrain without the
    /// real-sample and model-loss features (SA).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, required = true)]
        mode: Vec<Ablation>,
        #[arg(long)]
        controller: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a controller on another environment without fine-tuning.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        controller: Vec<PathBuf>,
        #[arg(long)]
        target_env: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Population-based training baseline.
    Pbt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        replace_frac: Option<f64>,
    },
    /// Tidy CSVs for learning curves, schedules, importance bars and phases.
    PlotData {
        /// Experiment ids (under the output root) or directories.
        #[arg(long, required = true)]
        experiment: Vec<PathBuf>,
        /// Output root; defaults to $MBSCHED_OUT or `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Welch's unequal-variance t-test on two comma-separated samples.
    WelchT {
        #[arg(long)]
        xs: String,
        #[arg(long)]
        ys: String,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

fn dispatch(cli: Cli) -> Result<Option<Outcome>> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let start = |cfg: RunConfig, mode: &str| Session::start(cfg, mode, exec);
    let out = match cli.command {
        Command::FviSweep { config } => commands::fvi_sweep(start(load(&config)?, "fvi-sweep")?)?,
        Command::TrainMbpo {
            config,
            mode,
            schedule_file,
            run_id,
        } => {
            let mode = match mode {
                TrainMode::Default => MbpoMode::Default,
                TrainMode::Sac1 => MbpoMode::Sac1,
                TrainMode::Sac20 => MbpoMode::Sac20,
                TrainMode::Schedule => MbpoMode::Schedule,
            };
            let s = start(load(&config)?, &format!("train-mbpo-{}", mode.name()))?;
            commands::train_mbpo(s, mode, schedule_file.as_deref(), run_id.as_deref())?
        }
        Command::BuildBaseline { config, n_seeds } => commands::build_baseline(start(load(&config)?, "build-baseline")?, n_seeds)?,
        Command::TrainController {
            config,
            baseline,
            episodes,
        } => commands::train_controller(start(load(&config)?, "train-controller")?, baseline.as_deref(), episodes)?,
        Command::EvalController {
            config,
            controller,
            episodes,
        } => commands::eval_controller(start(load(&config)?, "eval-controller")?, &controller, episodes)?,
        Command::Ablate {
            config,
            mode,
            controller,
            baseline,
            episodes,
        } => {
            let mut modes: Vec<AblateMode> = mode
                .iter()
                .map(|m| match m {
                    Ablation::R => AblateMode::R,
                    Ablation::M => AblateMode::M,
                    Ablation::P => AblateMode::P,
                    Ablation::L => AblateMode::L,
                    Ablation::Sa => AblateMode::Sa,
                })
                .collect();
            modes.sort();
            modes.dedup();
            let tag: Vec<&str> = modes.iter().map(|m| m.name()).collect();
            let s = start(load(&config)?, &format!("ablate-{}", tag.join("")))?;
            commands::ablate(s, &modes, &controller, baseline.as_deref(), episodes)?
        }
        Command::Transfer {
            config,
            controller,
            target_env,
            episodes,
        } => {
            let mut cfg = load(&config)?;
            cfg.env = target_env;
            cfg.validate()?;
            commands::transfer(start(cfg, "transfer")?, &controller, episodes)?
        }
        Command::Pbt {
            config,
            population,
            replace_frac,
        } => {
            let mut cfg = load(&config)?;
            if let Some(p) = population {
                cfg.pbt.population = p;
            }
            if let Some(f) = replace_frac {
                cfg.pbt.replace_frac = f;
            }
            cfg.validate()?;
            commands::pbt(start(cfg, "pbt")?)?
        }
        Command::PlotData { experiment, out } => {
            let root = out.or_else(|| std::env::var(OUT_ENV).ok().map(PathBuf::from)).unwrap_or_else(|| "runs".into());
            commands::plot_data(&root, &experiment)?
        }
        Command::WelchT { xs, ys } => {
            let w = mbsched::stats::welch_t(&parse_floats(&xs)?, &parse_floats(&ys)?)?;
            println!("{}", json!({"t": w.t, "df": w.df, "p": w.p}));
            return Ok(None);
        }
    };
    Ok(Some(out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = std::env::args().nth(1).unwrap_or_default();
    match dispatch(cli) {
        Ok(Some(out)) => {
            println!("{}", json!({"experiment_dir": out.dir, "summary": out.summary}));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": {"command": command, "message": format!("{e:#}"), "chain": chain}}));
            ExitCode::from(2)
        }
    }
}
