use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mbsched::hyper_mdp::HyperMdpConfig;
use mbsched::mbpo::{run_default_mbpo, EvalRow, MbpoRun};
use mbsched::nn::checkpoint::net_hash;
use mbsched::SeededRng;
use mbsched_cli::config::{PbtSection, RunConfig};
use mbsched_cli::manifest::read_manifest;
use mbsched_cli::pbt::{exploit, replace_count, run_pbt, PbtAction};
use mbsched_cli::schema::*;
use mbsched::par::Exec;
use serde_json::Value;
use tempfile::TempDir;

/// Tiny nets, one-episode hyper-episodes on Pendulum (no early termination).
const TINY: &str = r#"
name = "t"
env = "pendulum"
seeds = [1, 2]
episodes = 2

[mbpo]
branches = 4
warmup_steps = 100
eval_episodes = 1
initial = { beta = 0.05, g = 2, k = 1 }
sac = { hidden = [8, 8], batch_size = 32 }
ensemble = { members = 2, elites = 1, hidden = [8, 8] }
model_train = { max_epochs = 2 }

[hyper]
m = 1
eval_m = 3

[ppo]
updates_per_episode = 2
collect_batch = 2

[controller]
episodes = 2
baseline_seeds = [7]

[fvi]
betas = [0.5, 1.0]
n_reals = [64, 128]
k = 5
grid = 16
n_eval = 20
oracle_grid = 64
bootstrap = 10

[pbt]
population = 3
episodes = 2
"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

fn setup(extra: &str) -> Env {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("cfg.toml");
    std::fs::write(&config, format!("{TINY}\n{extra}")).unwrap();
    Env { dir, config }
}

impl Env {
    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mbsched"))
            .args(args)
            .env("MBSCHED_OUT", self.out())
            .env_remove("MBSCHED_SEEDS")
            .output()
            .unwrap()
    }

    /// Run a config-driven subcommand and return its experiment directory.
    fn ok(&self, cmd: &str, args: &[&str]) -> (PathBuf, Value) {
        let mut all = vec![cmd, "--config", self.config.to_str().unwrap()];
        all.extend_from_slice(args);
        let out = self.run(&all);
        assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        (PathBuf::from(v["experiment_dir"].as_str().unwrap()), v["summary"].clone())
    }
}

fn rows<T: serde::de::DeserializeOwned>(dir: &Path, file: &str, cols: &[&str]) -> Vec<T> {
    read_csv(&dir.join(file), cols).unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(RunConfig::from_toml("bogus = 1").is_err());
    assert!(RunConfig::from_toml("[mbpo]\nnot_a_field = 3").is_err());
    assert!(RunConfig::from_toml("[mbpo.sac]\nhidden = [4]\nlayers = 2").is_err());
    // Per-run fields cannot be set inside the MBPO section.
    assert!(RunConfig::from_toml("[mbpo]\nseed = 3").is_err());
}

#[test]
fn hash_ignores_key_order_seeds_and_output() {
    let a = RunConfig::from_toml("env = \"pendulum\"\nepisodes = 3\n[hyper]\nm = 2\neval_m = 6").unwrap();
    let b = RunConfig::from_toml("[hyper]\neval_m = 6\nm = 2\n").unwrap();
    let b = RunConfig {
        episodes: 3,
        env: "pendulum".into(),
        ..b
    };
    assert_eq!(a.hash(), b.hash());
    let c = RunConfig {
        seeds: vec![9, 10],
        out_dir: "elsewhere".into(),
        ..a.clone()
    };
    assert_eq!(a.hash(), c.hash());
    let d = RunConfig { episodes: 4, ..a.clone() };
    assert_ne!(a.hash(), d.hash());
}

#[test]
fn csv_schemas_are_frozen() {
    assert_eq!(SCHEMA_VERSION, 1);
    assert_eq!(
        EVAL_COLUMNS,
        ["run_id", "episode", "n_real", "eval_return", "model_holdout_loss", "critic_loss_avg", "beta", "g", "k", "model_trained"]
    );
    assert_eq!(SCHEDULE_COLUMNS, ["run_id", "real_step", "beta", "g", "k", "model_trained"]);
    assert_eq!(SWEEP_COLUMNS, ["beta", "n_real", "sigma", "K", "seed", "discrepancy"]);
    // The row types must serialise to exactly these headers.
    let header = |bytes: Vec<u8>| String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
    let mut w = csv::Writer::from_writer(vec![]);
    w.serialize(EvalRow {
        run_id: "x".into(),
        episode: 0,
        n_real: 0,
        eval_return: 0.0,
        model_holdout_loss: None,
        critic_loss_avg: None,
        beta: 0.0,
        g: 1,
        k: 1,
        model_trained: false,
    })
    .unwrap();
    assert_eq!(header(w.into_inner().unwrap()), EVAL_COLUMNS.join(","));
    let mut w = csv::Writer::from_writer(vec![]);
    w.serialize(SweepRow {
        beta: 1.0,
        n_real: 1,
        sigma: 0.0,
        k: 1,
        seed: 0,
        discrepancy: 0.0,
    })
    .unwrap();
    assert_eq!(header(w.into_inner().unwrap()), SWEEP_COLUMNS.join(","));
    let mut w = csv::Writer::from_writer(vec![]);
    w.serialize(ScheduleRow {
        run_id: "x".into(),
        real_step: 0,
        beta: 0.0,
        g: 1,
        k: 1,
        model_trained: true,
    })
    .unwrap();
    assert_eq!(header(w.into_inner().unwrap()), SCHEDULE_COLUMNS.join(","));
}

#[test]
fn fvi_sweep_smoke() {
    let env = setup("");
    let t = std::time::Instant::now();
    let (dir, summary) = env.ok("fvi-sweep", &[]);
    assert!(t.elapsed().as_secs() < 60);
    let sweep: Vec<SweepRow> = rows(&dir, "sweep.csv", SWEEP_COLUMNS);
    assert_eq!(sweep.len(), 2 * 2 * 2);
    assert_eq!(summary["rows"], 8);
    assert!(summary["degeneracy_ok"].is_null());
}

#[test]
fn fvi_sweep_exact_model_degenerates() {
    let env = setup("");
    let text = std::fs::read_to_string(&env.config).unwrap().replace("grid = 16", "grid = 16\nsigma = 0.0");
    std::fs::write(&env.config, text).unwrap();
    let (_, summary) = env.ok("fvi-sweep", &[]);
    assert_eq!(summary["degeneracy_ok"], true);
}

#[test]
fn schedule_export_replays_bit_exactly() {
    let env = setup("");
    let (first, _) = env.ok("train-mbpo", &[]);
    let sched = first.join("schedule.csv");
    let (replay, _) = env.ok(
        "train-mbpo",
        &["--mode", "schedule", "--schedule-file", sched.to_str().unwrap(), "--run-id", "pendulum-default-s1"],
    );
    let a: Vec<EvalRow> = rows(&first, "eval.csv", EVAL_COLUMNS);
    let b: Vec<EvalRow> = rows(&replay, "eval.csv", EVAL_COLUMNS);
    // Seed 1 of the replay follows the exported schedule of seed 1.
    let pick = |v: &[EvalRow], id: &str| v.iter().filter(|r| r.run_id == id).map(|r| (r.eval_return, r.n_real)).collect::<Vec<_>>();
    assert_eq!(pick(&a, "pendulum-default-s1"), pick(&b, "pendulum-schedule-s1"));
    let replayed: Vec<ScheduleRow> = rows(&replay, "schedule.csv", SCHEDULE_COLUMNS);
    let original: Vec<ScheduleRow> = rows(&first, "schedule.csv", SCHEDULE_COLUMNS);
    let strip = |v: &[ScheduleRow], id: &str| {
        v.iter()
            .filter(|r| r.run_id == id)
            .map(|r| (r.real_step, r.beta.to_bits(), r.g, r.k, r.model_trained))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&original, "pendulum-default-s1"), strip(&replayed, "pendulum-schedule-s1"));
    // Several runs in the file and no --run-id is an error.
    let out = env.run(&["train-mbpo", "--config", env.config.to_str().unwrap(), "--mode", "schedule", "--schedule-file", sched.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn sac_modes_have_no_model() {
    let env = setup("");
    let (dir, summary) = env.ok("train-mbpo", &["--mode", "sac1"]);
    let r: Vec<EvalRow> = rows(&dir, "eval.csv", EVAL_COLUMNS);
    assert_eq!(r.len(), 4);
    assert!(r.iter().all(|x| x.beta == 1.0 && x.g == 1 && x.model_holdout_loss.is_none()));
    assert!(summary["seeds"][0]["random_policy"].is_number());
}

#[test]
fn baseline_of_one_seed_is_its_reward_log_and_two_average() {
    let env = setup("");
    let (one, summary) = env.ok("build-baseline", &["--n-seeds", "1"]);
    assert_eq!(summary["length"], 4); // m·H/τ = 1·200/50
    let curve: Vec<BaselineRow> = rows(&one, "baseline.csv", BASELINE_COLUMNS);
    let rewards: Vec<RewardRow> = rows(&one, "rewards.csv", REWARD_COLUMNS);
    assert_eq!(curve.iter().map(|r| r.value).collect::<Vec<_>>(), rewards.iter().map(|r| r.reward).collect::<Vec<_>>());

    let (two, _) = env.ok("build-baseline", &[]);
    let curve: Vec<BaselineRow> = rows(&two, "baseline.csv", BASELINE_COLUMNS);
    let rewards: Vec<RewardRow> = rows(&two, "rewards.csv", REWARD_COLUMNS);
    for c in &curve {
        let v: Vec<f64> = rewards.iter().filter(|r| r.index == c.index).map(|r| r.reward).collect();
        assert_eq!(v.len(), 2);
        assert!((c.value - (v[0] + v[1]) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn controller_pipeline_trains_evaluates_ablates_and_plots() {
    let env = setup("");
    let (base, _) = env.ok("build-baseline", &["--n-seeds", "1"]);
    let (trained, summary) = env.ok("train-controller", &["--baseline", base.to_str().unwrap()]);
    assert_eq!(summary["controllers"].as_array().unwrap().len(), 2);
    assert!(trained.join("controller-s1.json").exists());
    let phases: Vec<PhaseRow> = rows(&trained, "phases.csv", PHASE_COLUMNS);
    assert!(!phases.is_empty());

    let (eval, summary) = env.ok("eval-controller", &["--controller", trained.to_str().unwrap()]);
    let finals: Vec<FinalRow> = rows(&eval, "final.csv", FINAL_COLUMNS);
    assert_eq!(finals.len(), 4);
    assert!(summary["comparison"]["welch"].is_object());
    assert!(eval.join("welch.json").exists());
    // M = 3m episodes of 200 steps, consulted every 50.
    let sched: Vec<ScheduleRow> = rows(&eval, "schedule.csv", SCHEDULE_COLUMNS);
    assert_eq!(sched.iter().filter(|r| r.run_id == "pendulum-controller-s1").count(), 12);
    let evals: Vec<EvalRow> = rows(&eval, "eval.csv", EVAL_COLUMNS);
    assert_eq!(evals.iter().filter(|r| r.run_id == "pendulum-controller-s2").count(), 3);

    // Ratio-only ablation: G and k never move from their initial values.
    let (abl, summary) = env.ok("ablate", &["--mode", "R", "--controller", trained.to_str().unwrap(), "--episodes", "2"]);
    let sched: Vec<ScheduleRow> = rows(&abl, "schedule.csv", SCHEDULE_COLUMNS);
    let r_rows: Vec<_> = sched.iter().filter(|r| r.run_id.contains("auto-R")).collect();
    assert!(!r_rows.is_empty());
    assert!(r_rows.iter().all(|r| r.g == 2 && r.k == 1));
    assert_eq!(summary["table"].as_array().unwrap().len(), 2);

    let out = env.run(&["plot-data", "--experiment", eval.to_str().unwrap(), "--experiment", trained.file_name().unwrap().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let plot = PathBuf::from(v["experiment_dir"].as_str().unwrap());
    let curves: Vec<CurveRow> = rows(&plot, "learning_curves.csv", CURVE_COLUMNS);
    assert_eq!(curves.len(), evals.len());
    let schedules: Vec<ScheduleRow> = rows(&plot, "schedules.csv", SCHEDULE_COLUMNS);
    assert_eq!(schedules.len(), rows::<ScheduleRow>(&eval, "schedule.csv", SCHEDULE_COLUMNS).len());
    let p: Vec<PhaseRow> = rows(&plot, "phases.csv", PHASE_COLUMNS);
    assert_eq!(p.len(), phases.len());
}

#[test]
fn state_ablation_retrains_with_six_features() {
    let env = setup("");
    let (_, summary) = env.ok("ablate", &["--mode", "SA", "--episodes", "1"]);
    assert_eq!(summary["notes"][0]["input_dim"], 6);
}

#[test]
fn transfer_warns_and_completes() {
    let env = setup("");
    let (base, _) = env.ok("build-baseline", &["--n-seeds", "1"]);
    let (trained, _) = env.ok("train-controller", &["--baseline", base.to_str().unwrap(), "--episodes", "1"]);
    let (dir, summary) = env.ok("transfer", &["--controller", trained.to_str().unwrap(), "--target-env", "point_mass_2d", "--episodes", "1"]);
    assert_eq!(summary["target_env"], "point_mass_2d");
    let warnings = read_manifest(&dir).unwrap().into_iter().filter(|r| r["event"] == "warning").count();
    assert_eq!(warnings, 2);
    let finals: Vec<FinalRow> = rows(&dir, "final.csv", FINAL_COLUMNS);
    assert!(finals.iter().any(|r| r.variant == "transfer" && r.env == "point_mass_2d"));
}

fn tiny_mbpo(seed: u64) -> mbsched::mbpo::MbpoConfig {
    let mut cfg = RunConfig::from_toml(TINY).unwrap().mbpo_for(seed);
    cfg.run_id = format!("pendulum-s{seed}");
    cfg
}

#[test]
fn pbt_of_one_is_default_mbpo() {
    let hyper = HyperMdpConfig {
        m: 1,
        eval_m: 3,
        ..HyperMdpConfig::default()
    };
    let pc = PbtSection {
        population: 1,
        episodes: 2,
        ..PbtSection::default()
    };
    let out = run_pbt(&tiny_mbpo(4), &hyper, &pc, 4, Exec::Sequential).unwrap();
    let default = run_default_mbpo(&tiny_mbpo(4), 2).unwrap();
    let a: Vec<f64> = out.rows.iter().map(|r| r.eval_return).collect();
    let b: Vec<f64> = default.rows.iter().map(|r| r.eval_return).collect();
    assert_eq!(a, b);
    assert!(out.rows.iter().all(|r| r.action == "kept"));
}

#[test]
fn exploit_copies_a_top_member() {
    assert_eq!(replace_count(1, 0.2), 0);
    assert_eq!(replace_count(4, 0.2), 1);
    assert_eq!(replace_count(10, 0.2), 2);
    let hyper = HyperMdpConfig::default();
    let mut members: Vec<MbpoRun> = (0..4).map(|s| MbpoRun::new(tiny_mbpo(s)).unwrap()).collect();
    let returns = [-10.0, -3.0, -50.0, -7.0];
    let pc = PbtSection {
        reinit_prob: 0.0,
        ..PbtSection::default()
    };
    let actions = exploit(&mut members, &returns, &pc, &hyper, &mut SeededRng::new(0));
    assert_eq!(actions[2], PbtAction::Copied(1));
    assert_eq!(net_hash(&members[2].agent.actor), net_hash(&members[1].agent.actor));
    assert_eq!(members[2].params, members[1].params);
    assert_ne!(net_hash(&members[0].agent.actor), net_hash(&members[1].agent.actor));

    let pc = PbtSection {
        reinit_prob: 1.0,
        ..PbtSection::default()
    };
    let before = net_hash(&members[0].agent.actor);
    let actions = exploit(&mut members, &[-99.0, 0.0, 0.0, 0.0], &pc, &hyper, &mut SeededRng::new(1));
    assert_eq!(actions[0], PbtAction::Reinit);
    assert_eq!(net_hash(&members[0].agent.actor), before);
}

#[test]
fn pbt_command_reports_comparison() {
    let env = setup("");
    let (dir, summary) = env.ok("pbt", &[]);
    let r: Vec<PbtRow> = rows(&dir, "pbt.csv", PBT_COLUMNS);
    assert_eq!(r.len(), 2 * 2 * 3);
    assert_eq!(summary["comparison"]["pairs"], 2);
}

#[test]
fn empty_experiment_gives_header_only_csvs() {
    let env = setup("");
    let empty = env.dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = env.run(&["plot-data", "--experiment", empty.to_str().unwrap()]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let plot = PathBuf::from(v["experiment_dir"].as_str().unwrap());
    let text = std::fs::read_to_string(plot.join("schedules.csv")).unwrap();
    assert_eq!(text, "run_id,real_step,beta,g,k,model_trained\n");
}

#[test]
fn reruns_never_overwrite() {
    let env = setup("");
    let (a, _) = env.ok("fvi-sweep", &[]);
    let (b, _) = env.ok("fvi-sweep", &[]);
    assert_ne!(a, b);
    let start = &read_manifest(&a).unwrap()[0];
    assert_eq!(start["event"], "start");
    assert_eq!(start["config_hash"], read_manifest(&b).unwrap()[0]["config_hash"]);
    let end = read_manifest(&a).unwrap().pop().unwrap();
    assert_eq!(end["status"], "ok");
}

#[test]
fn seed_override_from_environment() {
    let env = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_mbsched"))
        .args(["fvi-sweep", "--config", env.config.to_str().unwrap()])
        .env("MBSCHED_OUT", env.out())
        .env("MBSCHED_SEEDS", "5,6,7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["summary"]["rows"], 2 * 2 * 3);
    assert!(Path::new(v["experiment_dir"].as_str().unwrap()).starts_with(env.out()));
}

#[test]
fn errors_are_machine_readable() {
    let env = setup("oops = true");
    let out = env.run(&["fvi-sweep", "--config", env.config.to_str().unwrap()]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["command"], "fvi-sweep");
    assert!(v["error"]["message"].as_str().unwrap().contains("oops"));
}

#[test]
fn welch_t_command() {
    let env = setup("");
    let out = env.run(&["welch-t", "--xs", "1,2,3,4", "--ys", "1,2,3,4"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["t"], 0.0);
    assert_eq!(v["p"], 1.0);
    let out = env.run(&["welch-t", "--xs", "1,1,1", "--ys", "2,2,2"]);
    assert!(!out.status.success());
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum.toml");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.seeds.len(), 5);
}
