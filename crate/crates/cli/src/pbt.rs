//! Population-based training over MBPO instances with static per-member
//! hyperparameters between exploit steps.

use anyhow::Result;
use mbsched::hyper_mdp::{HyperMdpConfig, HyperParams};
use mbsched::mbpo::{DefaultSchedule, MbpoConfig, MbpoRun};
use mbsched::par::{self, Exec};
use mbsched::rng::derive_seed;
use mbsched::SeededRng;
use rand::Rng;

use crate::config::PbtSection;
use crate::schema::PbtRow;

#[derive(Debug, Clone, PartialEq)]
pub enum PbtAction {
    Kept,
    Copied(usize),
    Reinit,
}

impl PbtAction {
    pub fn label(&self) -> String {
        match self {
            PbtAction::Kept => "kept".into(),
            PbtAction::Copied(j) => format!("copied:{j}"),
            PbtAction::Reinit => "reinit".into(),
        }
    }
}

/// Log-uniform β in [β_min, 1], uniform G and k within their caps.
pub fn random_params(hyper: &HyperMdpConfig, rng: &mut SeededRng) -> HyperParams {
    let lo = hyper.beta_min.ln();
    HyperParams {
        beta: rng.gen_range(lo..=0.0f64).exp(),
        g: rng.gen_range(1..=hyper.g_max),
        k: rng.gen_range(1..=hyper.k_max),
    }
}

/// Members replaced per exploit step: none for a population of one,
/// otherwise round(frac·P) clamped to [1, P/2].
pub fn replace_count(population: usize, frac: f64) -> usize {
    if population < 2 || frac == 0.0 {
        return 0;
    }
    ((frac * population as f64).round() as usize).clamp(1, population / 2)
}

/// Replace the bottom performers by a random top performer, or re-initialise
/// their hyperparameters with probability `reinit_prob`.
pub fn exploit(
    members: &mut [MbpoRun],
    returns: &[f64],
    cfg: &PbtSection,
    hyper: &HyperMdpConfig,
    rng: &mut SeededRng,
) -> Vec<PbtAction> {
    let n = replace_count(members.len(), cfg.replace_frac);
    let mut actions = vec![PbtAction::Kept; members.len()];
    if n == 0 {
        return actions;
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    // Best first; ties keep member order.
    order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
    let top: Vec<usize> = order[..n].to_vec();
    for &loser in order[members.len() - n..].iter() {
        if rng.gen::<f64>() < cfg.reinit_prob {
            members[loser].params = random_params(hyper, rng).clamped(hyper);
            actions[loser] = PbtAction::Reinit;
        } else {
            let donor = top[rng.gen_range(0..top.len())];
            let src = members[donor].clone();
            members[loser].adopt(&src);
            actions[loser] = PbtAction::Copied(donor);
        }
    }
    actions
}

pub struct PbtOutcome {
    pub rows: Vec<PbtRow>,
    pub members: Vec<MbpoRun>,
    /// Best final evaluation return in the population.
    pub best_final: f64,
}

/// Member 0 starts from the configured hyperparameters and the run seed, so a
/// population of one is plain MBPO.
pub fn run_pbt(base: &MbpoConfig, hyper: &HyperMdpConfig, cfg: &PbtSection, seed: u64, exec: Exec) -> Result<PbtOutcome> {
    let mut rng = SeededRng::new(seed).split("pbt");
    let mut members = Vec::with_capacity(cfg.population);
    for i in 0..cfg.population {
        let mut mc = base.clone();
        mc.tau = hyper.tau;
        if i == 0 {
            mc.seed = seed;
        } else {
            mc.seed = derive_seed(seed, &format!("pbt#{i}"));
            mc.initial = random_params(hyper, &mut rng).clamped(hyper);
        }
        mc.run_id = format!("{}-m{i}", base.run_id());
        members.push(MbpoRun::new(mc)?);
    }
    let mut rows = Vec::new();
    let mut last = vec![f64::NAN; cfg.population];
    for ep in 0..cfg.episodes {
        let results: Vec<(MbpoRun, mbsched::Result<f64>)> = par::map(exec, std::mem::take(&mut members), |mut run| {
            let r = run.run_target_episode(&mut DefaultSchedule, None).map(|rep| rep.eval_return);
            (run, r)
        });
        for (run, r) in results {
            members.push(run);
            last[members.len() - 1] = r?;
        }
        let params: Vec<HyperParams> = members.iter().map(|m| m.params).collect();
        let actions = if ep + 1 < cfg.episodes {
            exploit(&mut members, &last, cfg, hyper, &mut rng)
        } else {
            vec![PbtAction::Kept; members.len()]
        };
        for (i, a) in actions.iter().enumerate() {
            rows.push(PbtRow {
                seed,
                episode: ep,
                member: i,
                beta: params[i].beta,
                g: params[i].g,
                k: params[i].k,
                eval_return: last[i],
                action: a.label(),
            });
        }
    }
    let best_final = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PbtOutcome {
        rows,
        members,
        best_final,
    })
}
