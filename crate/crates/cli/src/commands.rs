//! Subcommand drivers. Each one owns a fresh experiment directory and returns
//! a JSON summary that is also written to the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mbsched::controller::{
    hyper_config_hash, load_controller, save_controller,
    train_controller as core_train_controller, BaselineCurve, ControllerPolicy, Greedy, LoadedController,
};
use mbsched::envs::EnvSpec;
use mbsched::fvi::{
    argmin_by_n_real, beta_sweep, bootstrap_trend, exact_vi, is_non_decreasing, run_fvi, FviConfig, FviMdp,
};
use mbsched::hyper_mdp::{
    run_hyper_episode, FeatureSet, HeadMask, HyperEpisode, HyperMdpConfig, HyperParams, NeutralPolicy,
};
use mbsched::mbpo::{random_policy_return, run_default_mbpo, Budget, FixedSchedule, MbpoConfig, MbpoRun, RunLog};
use mbsched::par::{self, Exec};
use mbsched::stats::{mean, std_dev, welch_t};
use mbsched::SeededRng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::manifest::{ExperimentManifest, SeedStatus};
use crate::pbt::run_pbt;
use crate::schema::*;

pub struct Session {
    pub cfg: RunConfig,
    pub manifest: ExperimentManifest,
    pub exec: Exec,
}

#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: Value,
}

impl Session {
    pub fn start(cfg: RunConfig, mode: &str, exec: Exec) -> Result<Self> {
        let hash = cfg.hash();
        let doc = serde_json::to_value(&cfg)?;
        let manifest = ExperimentManifest::create(&cfg.out_dir, &cfg.name, mode, &hash, &doc)?;
        Ok(Self { cfg, manifest, exec })
    }

    /// Run `body`, closing the manifest as succeeded or failed.
    pub fn run<F>(mut self, body: F) -> Result<Outcome>
    where
        F: FnOnce(&mut Session) -> Result<Value>,
    {
        match body(&mut self) {
            Ok(summary) => {
                let dir = self.manifest.finish("ok", summary.clone())?;
                Ok(Outcome { dir, summary })
            }
            Err(e) => {
                let _ = self.manifest.finish("failed", json!({"error": format!("{e:#}")}));
                Err(e)
            }
        }
    }

    fn mbpo(&self, seed: u64, variant: &str) -> MbpoConfig {
        let mut c = self.cfg.mbpo_for(seed);
        c.run_id = format!("{}-{variant}-s{seed}", self.cfg.env);
        c
    }

    fn write<T: serde::Serialize>(&mut self, name: &str, columns: &[&str], rows: &[T]) -> Result<()> {
        let path = self.manifest.artifact(name);
        write_csv(&path, columns, rows)
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let path = self.manifest.artifact(name);
        fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
    }

    /// eval.csv, schedule.csv and events.jsonl for a set of runs.
    fn write_logs(&mut self, logs: &[&RunLog]) -> Result<()> {
        let rows: Vec<_> = logs.iter().flat_map(|l| l.rows.iter().cloned()).collect();
        self.write("eval.csv", EVAL_COLUMNS, &rows)?;
        let mut sched = Vec::new();
        for l in logs {
            let id = l.rows.first().map(|r| r.run_id.clone()).unwrap_or_default();
            sched.extend(l.intervals.iter().map(|r| ScheduleRow::from_interval(&id, r)));
        }
        self.write("schedule.csv", SCHEDULE_COLUMNS, &sched)?;
        let path = self.manifest.artifact("events.jsonl");
        let mut f = fs::File::create(&path)?;
        for l in logs {
            let id = l.rows.first().map(|r| r.run_id.clone()).unwrap_or_default();
            for e in &l.events {
                writeln!(f, "{}", json!({"run_id": id, "real_step": e.real_step, "episode": e.episode, "kind": e.kind, "detail": e.detail}))?;
            }
        }
        Ok(())
    }
}

fn final_return(log: &RunLog) -> Option<f64> {
    log.rows.last().map(|r| r.eval_return)
}

/// Welch comparison of two variants in `rows`, or the reason it is unavailable.
pub fn compare(rows: &[FinalRow], a: &str, b: &str) -> Value {
    let pick = |v: &str| rows.iter().filter(|r| r.variant == v).map(|r| r.final_return).collect::<Vec<_>>();
    let (xs, ys) = (pick(a), pick(b));
    let mut wins = 0;
    let mut pairs = 0;
    for r in rows.iter().filter(|r| r.variant == a) {
        if let Some(o) = rows.iter().find(|o| o.variant == b && o.seed == r.seed) {
            pairs += 1;
            if r.final_return >= o.final_return {
                wins += 1;
            }
        }
    }
    let welch = match welch_t(&xs, &ys) {
        Ok(w) => json!({"t": w.t, "df": w.df, "p": w.p}),
        Err(e) => json!({"error": e.to_string()}),
    };
    json!({
        "a": a,
        "b": b,
        "n_a": xs.len(),
        "n_b": ys.len(),
        "mean_a": if xs.is_empty() { Value::Null } else { json!(mean(&xs)) },
        "mean_b": if ys.is_empty() { Value::Null } else { json!(mean(&ys)) },
        "paired_wins": wins,
        "pairs": pairs,
        "welch": welch,
    })
}

pub fn fvi_sweep(s: Session) -> Result<Outcome> {
    s.run(|s| {
        let f = s.cfg.fvi.clone();
        let mdp = FviMdp::by_name(&f.mdp)?;
        let oracle = exact_vi(&mdp, f.oracle_grid, 1e-10)?;
        let base = f.base();
        let seeds = s.cfg.seeds.clone();
        let res = beta_sweep(&mdp, &f.betas, &f.n_reals, &base, &oracle, &seeds, s.exec)?;
        let rows: Vec<SweepRow> = res
            .cells
            .iter()
            .map(|c| SweepRow {
                beta: c.beta,
                n_real: c.n_real,
                sigma: c.sigma,
                k: c.k,
                seed: c.seed,
                discrepancy: c.discrepancy,
            })
            .collect();
        s.write("sweep.csv", SWEEP_COLUMNS, &rows)?;
        let summary: Vec<SweepSummaryRow> = res
            .summary
            .iter()
            .map(|m| SweepSummaryRow {
                n_real: m.n_real,
                beta: m.beta,
                mean: m.mean,
                std: m.std,
                seeds: seeds.len(),
            })
            .collect();
        s.write("sweep_summary.csv", SWEEP_SUMMARY_COLUMNS, &summary)?;
        let bootstrap = (seeds.len() >= 2 && f.bootstrap > 0)
            .then(|| bootstrap_trend(&res, &f.betas, &f.n_reals, f.bootstrap, &mut SeededRng::new(0)));
        let per_seed = seeds
            .iter()
            .filter(|&&seed| {
                let cells: Vec<_> = res.cells.iter().filter(|c| c.seed == seed).cloned().collect();
                is_non_decreasing(&argmin_by_n_real(&mbsched::fvi::summarize(&cells, &f.betas, &f.n_reals), &f.n_reals))
            })
            .count();
        // With an exact model every cell must reproduce the β = 1 run at the same N.
        let degeneracy = (f.sigma == 0.0)
            .then(|| -> Result<bool> {
                for c in &res.cells {
                    let cfg = FviConfig {
                        beta: 1.0,
                        n: c.n,
                        ..base.clone()
                    };
                    if run_fvi(&mdp, &cfg, &oracle, c.seed)?.discrepancy.to_bits() != c.discrepancy.to_bits() {
                        return Ok(false);
                    }
                }
                Ok(true)
            })
            .transpose()?;
        Ok(json!({
            "rows": rows.len(),
            "argmin": res.argmin,
            "argmin_non_decreasing": is_non_decreasing(&res.argmin),
            "seeds_non_decreasing": per_seed,
            "bootstrap_fraction": bootstrap,
            "degeneracy_ok": degeneracy,
        }))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbpoMode {
    Default,
    Sac1,
    Sac20,
    Schedule,
}

impl MbpoMode {
    pub fn name(self) -> &'static str {
        match self {
            MbpoMode::Default => "default",
            MbpoMode::Sac1 => "sac1",
            MbpoMode::Sac20 => "sac20",
            MbpoMode::Schedule => "schedule",
        }
    }
}

/// Pick one run's rows from a schedule export: `run_id` if given, else the
/// only run in the file.
pub fn load_schedule(path: &Path, run_id: Option<&str>) -> Result<FixedSchedule> {
    let rows: Vec<ScheduleRow> = read_csv(path, SCHEDULE_COLUMNS)?;
    let mut groups: BTreeMap<String, Vec<ScheduleRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.run_id.clone()).or_default().push(r);
    }
    let chosen = match run_id {
        Some(id) => groups.remove(id).with_context(|| format!("run {id} not in {}", path.display()))?,
        None if groups.len() == 1 => groups.into_values().next().unwrap(),
        None => bail!("{} holds {} runs; pick one with --run-id", path.display(), groups.len()),
    };
    Ok(FixedSchedule {
        rows: chosen.iter().enumerate().map(|(i, r)| r.to_interval(i)).collect(),
    })
}

pub fn train_mbpo(s: Session, mode: MbpoMode, schedule: Option<&Path>, run_id: Option<&str>) -> Result<Outcome> {
    let fixed = match (mode, schedule) {
        (MbpoMode::Schedule, Some(p)) => Some(load_schedule(p, run_id)?),
        (MbpoMode::Schedule, None) => bail!("mode schedule needs --schedule-file"),
        _ => None,
    };
    s.run(|s| {
        let episodes = s.cfg.episodes;
        let configs: Vec<(u64, MbpoConfig)> = s
            .cfg
            .seeds
            .iter()
            .map(|&seed| {
                let mut c = s.mbpo(seed, mode.name());
                if let MbpoMode::Sac1 | MbpoMode::Sac20 = mode {
                    c.use_model = false;
                    c.initial = HyperParams {
                        beta: 1.0,
                        g: if mode == MbpoMode::Sac1 { 1 } else { 20 },
                        k: 1,
                    };
                }
                (seed, c)
            })
            .collect();
        let logs: Vec<(u64, Result<RunLog>)> = par::map(s.exec, configs, |(seed, c)| {
            let log = match &fixed {
                Some(f) => MbpoRun::new(c).and_then(|mut run| {
                    run.run(&mut f.clone(), Budget::Episodes(episodes))?;
                    Ok(run.log)
                }),
                None => run_default_mbpo(&c, episodes),
            };
            (seed, log.map_err(Into::into))
        });
        let spec = EnvSpec::by_name(&s.cfg.env)?;
        let mut ok = Vec::new();
        let mut finals = Vec::new();
        let mut per_seed = Vec::new();
        for (seed, log) in logs {
            let log = log.with_context(|| format!("seed {seed}"))?;
            let best = log.rows.iter().map(|r| r.eval_return).fold(f64::NEG_INFINITY, f64::max);
            let random = random_policy_return(&spec, 5, seed)?;
            let fin = final_return(&log).unwrap_or(f64::NAN);
            s.manifest.seed_done(seed, SeedStatus::Ok, json!({"final": fin, "best": best, "random": random}))?;
            per_seed.push(json!({"seed": seed, "final": fin, "best": best, "random_policy": random}));
            finals.push(FinalRow {
                seed,
                env: s.cfg.env.clone(),
                variant: mode.name().into(),
                final_return: fin,
            });
            ok.push(log);
        }
        s.write_logs(&ok.iter().collect::<Vec<_>>())?;
        s.write("final.csv", FINAL_COLUMNS, &finals)?;
        Ok(json!({"mode": mode.name(), "episodes": episodes, "seeds": per_seed}))
    })
}

fn baseline_from(s: &mut Session, seeds: &[u64]) -> Result<(BaselineCurve, Vec<HyperEpisode>)> {
    let mbpo = s.mbpo(seeds[0], "baseline");
    let hyper = s.cfg.hyper.clone();
    let runs: Vec<(u64, mbsched::Result<HyperEpisode>)> = par::map(s.exec, seeds.to_vec(), |seed| {
        let mut c = mbpo.clone();
        c.run_id = format!("{}-baseline-s{seed}", c.env);
        (seed, run_hyper_episode(&NeutralPolicy, &c, &hyper, hyper.m, seed))
    });
    let mut eps = Vec::new();
    for (seed, ep) in runs {
        let ep = ep?;
        if !ep.valid {
            bail!("baseline run for seed {seed} failed: {}", ep.error.clone().unwrap_or_default());
        }
        eps.push(ep);
    }
    let curve = BaselineCurve::from_episodes(&eps, seeds, &s.cfg.env, &s.cfg.hyper)?;
    Ok((curve, eps))
}

pub fn build_baseline(s: Session, n_seeds: Option<usize>) -> Result<Outcome> {
    s.run(|s| {
        let mut seeds = s.cfg.seeds.clone();
        if let Some(n) = n_seeds {
            ensure!(n >= 1 && n <= seeds.len(), "--n-seeds {n} but the config lists {} seeds", seeds.len());
            seeds.truncate(n);
        }
        let (curve, eps) = baseline_from(s, &seeds)?;
        let mut rewards = Vec::new();
        for (seed, ep) in seeds.iter().zip(&eps) {
            rewards.extend(ep.rewards().into_iter().enumerate().map(|(index, reward)| RewardRow {
                seed: *seed,
                index,
                reward,
            }));
            s.manifest.seed_done(*seed, SeedStatus::Ok, json!({"total_reward": ep.total_reward()}))?;
        }
        s.write("rewards.csv", REWARD_COLUMNS, &rewards)?;
        let rows: Vec<BaselineRow> = curve.values.iter().enumerate().map(|(index, &value)| BaselineRow { index, value }).collect();
        s.write("baseline.csv", BASELINE_COLUMNS, &rows)?;
        s.write_json("baseline.json", &serde_json::to_value(&curve)?)?;
        let logs: Vec<&RunLog> = eps.iter().map(|e| &e.log).collect();
        s.write_logs(&logs)?;
        Ok(json!({"length": curve.len(), "seeds": seeds}))
    })
}

pub fn read_baseline(path: &Path) -> Result<BaselineCurve> {
    let path = if path.is_dir() { path.join("baseline.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn obtain_baseline(s: &mut Session, baseline: Option<&Path>) -> Result<BaselineCurve> {
    match baseline {
        Some(p) => {
            let b = read_baseline(p)?;
            if b.env != s.cfg.env {
                s.manifest.warn(&format!("baseline was built on {} but the run targets {}", b.env, s.cfg.env))?;
            }
            Ok(b)
        }
        None => {
            let seeds = s.cfg.controller.baseline_seeds.clone();
            ensure!(!seeds.is_empty(), "controller.baseline_seeds is empty and no --baseline was given");
            let (curve, _) = baseline_from(s, &seeds)?;
            let rows: Vec<BaselineRow> = curve.values.iter().enumerate().map(|(index, &value)| BaselineRow { index, value }).collect();
            s.write("baseline.csv", BASELINE_COLUMNS, &rows)?;
            s.write_json("baseline.json", &serde_json::to_value(&curve)?)?;
            Ok(curve)
        }
    }
}

/// Train one controller per seed; checkpoints land in `controller-s{seed}.json`.
fn train_controllers(s: &mut Session, hyper: &HyperMdpConfig, baseline: &BaselineCurve, episodes: usize, tag: &str) -> Result<Vec<(u64, ControllerPolicy)>> {
    let mut out = Vec::new();
    let mut training = Vec::new();
    let mut phases = Vec::new();
    for seed in s.cfg.seeds.clone() {
        let mbpo = s.mbpo(seed, tag);
        let tr = core_train_controller(&mbpo, hyper, &s.cfg.ppo, baseline, episodes, seed, s.exec)?;
        training.extend(tr.history.iter().map(|e| TrainingRow {
            seed,
            index: e.index,
            episode_seed: e.seed,
            total_reward: e.total_reward,
            final_eval: e.final_eval,
            valid: e.valid,
        }));
        let q = tr.quintiles();
        phases.extend(q.iter().enumerate().map(|(phase, &m)| PhaseRow {
            seed,
            phase,
            mean_return: m,
        }));
        let path = s.manifest.artifact(&format!("controller-s{seed}.json"));
        save_controller(
            &tr.policy,
            &path,
            json!({"env": s.cfg.env, "seed": seed, "episodes": episodes, "run_config_hash": s.manifest.config_hash}),
        )?;
        let status = if tr.invalid == tr.history.len() { SeedStatus::Invalid } else { SeedStatus::Ok };
        s.manifest.seed_done(
            seed,
            status,
            json!({"quintiles": q, "invalid": tr.invalid, "updates": tr.updates, "params_hash": tr.policy.params_hash()}),
        )?;
        out.push((seed, tr.policy));
    }
    s.write("training.csv", TRAINING_COLUMNS, &training)?;
    s.write("phases.csv", PHASE_COLUMNS, &phases)?;
    Ok(out)
}

pub fn train_controller(s: Session, baseline: Option<&Path>, episodes: Option<usize>) -> Result<Outcome> {
    s.run(|s| {
        let curve = obtain_baseline(s, baseline)?;
        let episodes = episodes.unwrap_or(s.cfg.controller.episodes);
        let hyper = s.cfg.hyper.clone();
        let trained = train_controllers(s, &hyper, &curve, episodes, "controller")?;
        Ok(json!({
            "episodes": episodes,
            "controllers": trained.iter().map(|(seed, p)| json!({"seed": seed, "params_hash": p.params_hash()})).collect::<Vec<_>>(),
        }))
    })
}

/// Expand directories to their `controller-s*.json` files, sorted by name.
pub fn controller_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("controller-s") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            ensure!(!found.is_empty(), "no controller checkpoints in {}", p.display());
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    ensure!(!out.is_empty(), "no controller given");
    Ok(out)
}

fn load_all(s: &mut Session, paths: &[PathBuf]) -> Result<Vec<ControllerPolicy>> {
    let expected = hyper_config_hash(&s.cfg.env, &s.cfg.hyper);
    let mut out = Vec::new();
    for p in controller_paths(paths)? {
        let LoadedController {
            policy,
            transfer_warning,
        } = load_controller(&p, Some(&expected)).with_context(|| format!("loading {}", p.display()))?;
        if let Some(w) = transfer_warning {
            s.manifest.warn(&format!("{}: {w}", p.display()))?;
        }
        out.push(policy);
    }
    Ok(out)
}

/// Run `policy` for `episodes` target episodes; the hyper-MDP features follow
/// the policy's own feature set.
fn controlled_run(policy: &ControllerPolicy, greedy: bool, mbpo: &MbpoConfig, hyper: &HyperMdpConfig, episodes: usize, seed: u64) -> Result<HyperEpisode> {
    let h = HyperMdpConfig {
        features: policy.features,
        ..hyper.clone()
    };
    let ep = if greedy {
        run_hyper_episode(&Greedy(policy), mbpo, &h, episodes, seed)?
    } else {
        run_hyper_episode(policy, mbpo, &h, episodes, seed)?
    };
    Ok(ep)
}

/// Evaluate each (variant, policy) on every seed against default MBPO.
fn evaluate_variants(s: &mut Session, variants: &[(String, Vec<ControllerPolicy>)], episodes: usize) -> Result<Vec<FinalRow>> {
    let greedy = s.cfg.controller.greedy_eval;
    let hyper = s.cfg.hyper.clone();
    let mut jobs: Vec<(u64, String, Option<ControllerPolicy>, MbpoConfig)> = Vec::new();
    for (i, &seed) in s.cfg.seeds.iter().enumerate() {
        jobs.push((seed, "default".into(), None, s.mbpo(seed, "default")));
        for (name, policies) in variants {
            let p = policies[i % policies.len()].clone();
            jobs.push((seed, name.clone(), Some(p), s.mbpo(seed, name)));
        }
    }
    let results = par::map(s.exec, jobs, |(seed, name, policy, mbpo)| {
        let log = match &policy {
            None => run_default_mbpo(&mbpo, episodes).map_err(anyhow::Error::from),
            Some(p) => controlled_run(p, greedy, &mbpo, &hyper, episodes, seed).and_then(|ep| {
                ensure!(ep.valid, "controlled run failed: {}", ep.error.clone().unwrap_or_default());
                Ok(ep.log)
            }),
        };
        (seed, name, log)
    });
    let mut finals = Vec::new();
    let mut logs = Vec::new();
    for (seed, name, log) in results {
        match log {
            Ok(log) => {
                finals.push(FinalRow {
                    seed,
                    env: s.cfg.env.clone(),
                    variant: name,
                    final_return: final_return(&log).unwrap_or(f64::NAN),
                });
                logs.push(log);
            }
            Err(e) => {
                s.manifest.seed_done(seed, SeedStatus::Failed, json!({"variant": name, "error": format!("{e:#}")}))?;
            }
        }
    }
    for seed in s.cfg.seeds.clone() {
        let n = finals.iter().filter(|r| r.seed == seed).count();
        if n == variants.len() + 1 {
            s.manifest.seed_done(seed, SeedStatus::Ok, json!({}))?;
        }
    }
    s.write_logs(&logs.iter().collect::<Vec<_>>())?;
    s.write("final.csv", FINAL_COLUMNS, &finals)?;
    Ok(finals)
}

fn importance(rows: &[FinalRow]) -> Vec<ImportanceRow> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.variant).or_default().push(r.final_return);
    }
    by.into_iter()
        .map(|(v, xs)| ImportanceRow {
            variant: v.into(),
            mean_final: mean(&xs),
            std_final: if xs.len() > 1 { std_dev(&xs) } else { 0.0 },
            n: xs.len(),
        })
        .collect()
}

pub fn eval_controller(s: Session, controllers: &[PathBuf], episodes: Option<usize>) -> Result<Outcome> {
    s.run(|s| {
        let policies = load_all(s, controllers)?;
        let episodes = episodes.unwrap_or(s.cfg.hyper.eval_m);
        let finals = evaluate_variants(s, &[("controller".into(), policies)], episodes)?;
        let cmp = compare(&finals, "controller", "default");
        s.write_json("welch.json", &cmp)?;
        Ok(json!({"episodes": episodes, "comparison": cmp}))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblateMode {
    R,
    M,
    P,
    L,
    Sa,
}

impl AblateMode {
    pub fn name(self) -> &'static str {
        match self {
            AblateMode::R => "R",
            AblateMode::M => "M",
            AblateMode::P => "P",
            AblateMode::L => "L",
            AblateMode::Sa => "SA",
        }
    }

    /// The single head a scheduling ablation keeps; `None` for SA.
    pub fn mask(self) -> Option<HeadMask> {
        let only = |h: usize| {
            let mut m = HeadMask::NONE;
            match h {
                0 => m.ratio = true,
                1 => m.train = true,
                2 => m.g = true,
                _ => m.k = true,
            }
            m
        };
        match self {
            AblateMode::R => Some(only(0)),
            AblateMode::M => Some(only(1)),
            AblateMode::P => Some(only(2)),
            AblateMode::L => Some(only(3)),
            AblateMode::Sa => None,
        }
    }
}

fn intersect(a: HeadMask, b: HeadMask) -> HeadMask {
    HeadMask {
        ratio: a.ratio && b.ratio,
        train: a.train && b.train,
        g: a.g && b.g,
        k: a.k && b.k,
    }
}

pub fn ablate(s: Session, modes: &[AblateMode], controllers: &[PathBuf], baseline: Option<&Path>, episodes: Option<usize>) -> Result<Outcome> {
    s.run(|s| {
        ensure!(!modes.is_empty(), "no ablation mode given");
        let episodes = episodes.unwrap_or(s.cfg.hyper.eval_m);
        let trained = if modes.iter().any(|m| m.mask().is_some()) {
            ensure!(!controllers.is_empty(), "modes R/M/P/L need --controller");
            load_all(s, controllers)?
        } else {
            Vec::new()
        };
        let mut variants = Vec::new();
        let mut notes = Vec::new();
        for &mode in modes {
            match mode.mask() {
                Some(mask) => {
                    let ps = trained
                        .iter()
                        .map(|p| ControllerPolicy {
                            mask: intersect(p.mask, mask),
                            ..p.clone()
                        })
                        .collect();
                    variants.push((format!("auto-{}", mode.name()), ps));
                }
                None => {
                    let curve = obtain_baseline(s, baseline)?;
                    let hyper = HyperMdpConfig {
                        features: FeatureSet::NoRealNoModel,
                        ..s.cfg.hyper.clone()
                    };
                    let ps: Vec<ControllerPolicy> = train_controllers(s, &hyper, &curve, s.cfg.controller.episodes, "sa")?
                        .into_iter()
                        .map(|(_, p)| p)
                        .collect();
                    notes.push(json!({"mode": "SA", "input_dim": ps[0].input_dim()}));
                    variants.push(("auto-SA".to_string(), ps));
                }
            }
        }
        let finals = evaluate_variants(s, &variants, episodes)?;
        let table = importance(&finals);
        s.write("importance.csv", IMPORTANCE_COLUMNS, &table)?;
        Ok(json!({"episodes": episodes, "table": table.iter().map(|r| json!({"variant": r.variant, "mean": r.mean_final, "std": r.std_final, "n": r.n})).collect::<Vec<_>>(), "notes": notes}))
    })
}

/// Evaluate controllers trained elsewhere on `s.cfg.env`, without fine-tuning.
/// Heads disabled by the target config are masked.
pub fn transfer(s: Session, controllers: &[PathBuf], episodes: Option<usize>) -> Result<Outcome> {
    s.run(|s| {
        let heads = s.cfg.hyper.heads;
        let policies: Vec<ControllerPolicy> = load_all(s, controllers)?
            .into_iter()
            .map(|p| ControllerPolicy {
                mask: intersect(p.mask, heads),
                ..p
            })
            .collect();
        let episodes = episodes.unwrap_or(s.cfg.hyper.eval_m);
        let finals = evaluate_variants(s, &[("transfer".into(), policies)], episodes)?;
        let cmp = compare(&finals, "transfer", "default");
        s.write_json("welch.json", &cmp)?;
        Ok(json!({"target_env": s.cfg.env, "episodes": episodes, "comparison": cmp}))
    })
}

pub fn pbt(s: Session) -> Result<Outcome> {
    s.run(|s| {
        let pc = s.cfg.pbt.clone();
        let hyper = s.cfg.hyper.clone();
        let mut rows = Vec::new();
        let mut finals = Vec::new();
        for seed in s.cfg.seeds.clone() {
            let out = run_pbt(&s.mbpo(seed, "pbt"), &hyper, &pc, seed, s.exec)?;
            let default = run_default_mbpo(&s.mbpo(seed, "default"), pc.episodes)?;
            finals.push(FinalRow {
                seed,
                env: s.cfg.env.clone(),
                variant: "pbt".into(),
                final_return: out.best_final,
            });
            finals.push(FinalRow {
                seed,
                env: s.cfg.env.clone(),
                variant: "default".into(),
                final_return: final_return(&default).unwrap_or(f64::NAN),
            });
            s.manifest.seed_done(seed, SeedStatus::Ok, json!({"best_final": out.best_final}))?;
            rows.extend(out.rows);
        }
        s.write("pbt.csv", PBT_COLUMNS, &rows)?;
        s.write("final.csv", FINAL_COLUMNS, &finals)?;
        let cmp = compare(&finals, "pbt", "default");
        s.write_json("welch.json", &cmp)?;
        Ok(json!({"population": pc.population, "episodes": pc.episodes, "comparison": cmp}))
    })
}

/// Tidy plotting tables gathered from finished experiment directories.
pub fn plot_data(out_root: &Path, experiments: &[PathBuf]) -> Result<Outcome> {
    let dirs: Vec<PathBuf> = experiments
        .iter()
        .map(|e| if e.is_dir() { e.clone() } else { out_root.join(e) })
        .collect();
    for d in &dirs {
        ensure!(d.is_dir(), "experiment {} not found", d.display());
    }
    let names: Vec<String> = dirs.iter().map(|d| d.display().to_string()).collect();
    let hash = {
        use sha2::{Digest, Sha256};
        format!("{:x}", Sha256::digest(names.join("\n").as_bytes()))
    };
    let manifest = ExperimentManifest::create(out_root, "plot", "plot-data", &hash, &json!({"sources": names}))?;
    let s = Session {
        cfg: RunConfig::default(),
        manifest,
        exec: Exec::Sequential,
    };
    s.run(|s| {
        let mut curves = Vec::new();
        let mut schedules = Vec::new();
        let mut finals: Vec<FinalRow> = Vec::new();
        let mut phases = Vec::new();
        for d in &dirs {
            if d.join("eval.csv").exists() {
                let rows: Vec<mbsched::mbpo::EvalRow> = read_csv(&d.join("eval.csv"), EVAL_COLUMNS)?;
                curves.extend(rows.iter().map(CurveRow::from));
            }
            if d.join("schedule.csv").exists() {
                schedules.extend(read_csv::<ScheduleRow>(&d.join("schedule.csv"), SCHEDULE_COLUMNS)?);
            }
            if d.join("final.csv").exists() {
                finals.extend(read_csv::<FinalRow>(&d.join("final.csv"), FINAL_COLUMNS)?);
            }
            if d.join("phases.csv").exists() {
                phases.extend(read_csv::<PhaseRow>(&d.join("phases.csv"), PHASE_COLUMNS)?);
            }
        }
        let table = importance(&finals);
        s.write("learning_curves.csv", CURVE_COLUMNS, &curves)?;
        s.write("schedules.csv", SCHEDULE_COLUMNS, &schedules)?;
        s.write("importance.csv", IMPORTANCE_COLUMNS, &table)?;
        s.write("phases.csv", PHASE_COLUMNS, &phases)?;
        Ok(json!({
            "learning_curves": curves.len(),
            "schedules": schedules.len(),
            "importance": table.len(),
            "phases": phases.len(),
        }))
    })
}
