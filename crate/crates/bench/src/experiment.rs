//! End-to-end runs: instance construction, per-seed pipelines and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use glap_core::featureest::estimate_feature_visitations;
use glap_core::glap::{entropy, probability_hash, run_glap, Preset, RegretTracker, TraceRecord};
use glap_core::linalg::stream_rng;
use glap_core::mdp::{make_random_mdp, Environment, EpisodeRunner, Simulator};
use glap_core::policycover::{build_cover, policy_values};
use glap_core::{
    CoverSpec, EstimationConfig, FeatureTable, GlapConfig, InitialState, LinearMdp, LossSequence,
    Policy, PolicyCover, RunTrace,
};
use rand::Rng;
use rayon::prelude::*;

use crate::adversary::{generate_losses, AdversarySpec};
use crate::config::{Algorithm, ExperimentConfig, FeatureSourceKind, InitKind, Mode};

/// RNG stream ids, one per consumer within a seed.
const STREAM_ESTIMATION: u64 = 1;
const STREAM_PLAY: u64 = 2;

/// Everything that is shared by all seeds of an experiment.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: LinearMdp,
    pub losses: LossSequence,
    pub cover: PolicyCover,
    pub policies: Vec<Policy>,
    /// `values[pi][k] = V_k^pi` for the cover.
    pub values: Vec<Vec<f64>>,
}

pub fn build_mdp(cfg: &ExperimentConfig) -> Result<LinearMdp> {
    let mdp = match &cfg.mdp.file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            LinearMdp::from_json(&text)?
        }
        None => make_random_mdp(cfg.mdp.states, cfg.mdp.actions, cfg.mdp.horizon, cfg.mdp.dim, cfg.mdp.seed)?,
    };
    Ok(match cfg.mdp.init {
        InitKind::Fixed => mdp,
        InitKind::Uniform => mdp.with_initial(InitialState::uniform(mdp.num_states()))?,
    })
}

pub fn build_losses(cfg: &ExperimentConfig, mdp: &LinearMdp) -> Result<LossSequence> {
    let k = cfg.glap.k;
    match &cfg.adversary.file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let losses = LossSequence::from_json(&text)?;
            if losses.num_episodes() < k {
                bail!("loss file has {} episodes, K = {k}", losses.num_episodes());
            }
            Ok(losses.truncated(k))
        }
        None => {
            let spec = AdversarySpec {
                kind: cfg.adversary.kind,
                omega: cfg.adversary.omega,
                period: cfg.adversary.period,
                seed: cfg.adversary.seed,
            };
            Ok(generate_losses(mdp, &spec, k)?)
        }
    }
}

pub fn build_policy_cover(cfg: &ExperimentConfig, mdp: &LinearMdp) -> Result<PolicyCover> {
    if let Some(path) = &cfg.cover.file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(PolicyCover::from_json(&text)?);
    }
    let temperature = cfg
        .cover
        .temperature
        .unwrap_or_else(|| CoverSpec::default_temperature(mdp.dim(), mdp.horizon(), cfg.glap.k));
    Ok(build_cover(CoverSpec {
        dim: mdp.dim(),
        horizon: mdp.horizon(),
        eps_prime: cfg.cover.eps_prime,
        budget: cfg.cover.budget,
        mode: cfg.cover.mode,
        seed: cfg.cover.seed,
        temperature,
    })?)
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    let mdp = build_mdp(cfg)?;
    let losses = build_losses(cfg, &mdp)?;
    let cover = build_policy_cover(cfg, &mdp)?;
    let policies = cover.materialize(&mdp)?;
    let values = policy_values(&mdp, &policies, &losses);
    Ok(Instance { mdp, losses, cover, policies, values })
}

/// Parameters after applying the preset and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub preset: Preset,
    pub gamma: f64,
    pub eps: f64,
    pub glap: GlapConfig,
    pub estimation: EstimationConfig,
}

pub fn resolve(cfg: &ExperimentConfig, mdp: &LinearMdp, num_policies: usize) -> Resolved {
    let preset = Preset::compute(cfg.glap.preset, mdp.dim(), mdp.horizon(), num_policies, cfg.glap.k, cfg.glap.delta);
    let gamma = cfg.glap.gamma.unwrap_or(preset.gamma);
    let eps = cfg.glap.eps.unwrap_or(preset.eps);
    let mut glap = GlapConfig::new(gamma, cfg.glap.delta, cfg.glap.k);
    glap.bonus_log_pi = cfg.glap.bonus_log_pi;
    let estimation = EstimationConfig {
        eps,
        delta: cfg.glap.delta,
        budget: cfg.features.budget,
        warmup: cfg.features.warmup,
        floor: cfg.features.floor,
        perturb: cfg.features.perturb,
        redesign_every: cfg.features.redesign_every,
        ..EstimationConfig::default()
    };
    Resolved { preset, gamma, eps, glap, estimation }
}

/// Result of one seed's pipeline.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub trace: RunTrace,
    /// Simulator episodes spent on feature estimation (simulator mode).
    pub oracle_episodes: u64,
    /// Real-environment episodes spent on feature estimation (live mode).
    pub estimation_episodes: u64,
}

impl SeedOutcome {
    pub fn final_regret(&self) -> f64 {
        self.trace.final_regret()
    }
}

pub type SeedResult = std::result::Result<SeedOutcome, String>;

/// Feature table for a learner that estimates visitations, with the number
/// of episodes it cost.
fn feature_table(
    cfg: &ExperimentConfig,
    inst: &Instance,
    resolved: &Resolved,
    seed: u64,
) -> Result<(FeatureTable, u64)> {
    if let Some(path) = &cfg.features.file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table = FeatureTable::from_json(&text)?;
        if table.num_policies() != inst.policies.len() {
            bail!("feature file has {} policies, cover has {}", table.num_policies(), inst.policies.len());
        }
        return Ok((table, 0));
    }
    if cfg.features.source == FeatureSourceKind::Exact {
        return Ok((FeatureTable::exact(&inst.mdp, &inst.policies), 0));
    }
    let mut rng = stream_rng(seed, STREAM_ESTIMATION);
    let est = &resolved.estimation;
    let table = match cfg.mode {
        Mode::Simulator => {
            let mut env = Simulator::new(&inst.mdp);
            estimate_feature_visitations(&mut env, &inst.policies, est, Some(seed), &mut rng)?
        }
        Mode::Live => {
            let mut env = EpisodeRunner::new(&inst.mdp);
            estimate_feature_visitations(&mut env, &inst.policies, est, Some(seed), &mut rng)?
        }
    };
    let episodes = table.total_episodes();
    Ok((table, episodes))
}

/// Plays a fixed rule that ignores feedback: `choose(k, rng)` picks the policy.
fn run_baseline(
    inst: &Instance,
    k_total: usize,
    mut choose: impl FnMut(usize, &mut dyn rand::RngCore) -> usize,
    p: &[f64],
    seed: u64,
) -> RunTrace {
    let mut env = EpisodeRunner::new(&inst.mdp);
    let mut rng = stream_rng(seed, STREAM_PLAY);
    let mut tracker = RegretTracker::new(Some(&inst.values), k_total, 0.0);
    let (p_entropy, p_hash) = (entropy(p), probability_hash(p));
    let records = (0..k_total)
        .map(|k| {
            let chosen = choose(k, &mut rng);
            let traj = env.run_episode(&inst.policies[chosen], inst.losses.episode(k), &mut rng);
            let (exact_value, cum_regret) = tracker.record(k, chosen);
            TraceRecord {
                episode: k + 1,
                chosen_policy: chosen,
                realized_loss: traj.total_loss(),
                exact_value,
                cum_regret,
                p_entropy,
                max_leverage: f64::NAN,
                p_hash,
            }
        })
        .collect();
    RunTrace {
        records,
        best_policy: tracker.best(),
        final_p: p.to_vec(),
        bounds: Default::default(),
        jitter_events: 0,
        regret_offset: 0.0,
    }
}

/// Runs one seed of the configured algorithm on a prepared instance.
pub fn run_seed(cfg: &ExperimentConfig, inst: &Instance, resolved: &Resolved, seed: u64) -> Result<SeedOutcome> {
    let n = inst.policies.len();
    let k_total = cfg.glap.k;
    let outcome = |trace, oracle_episodes, estimation_episodes| SeedOutcome {
        seed,
        trace,
        oracle_episodes,
        estimation_episodes,
    };
    match cfg.algorithm {
        Algorithm::BestFixedOracle => {
            let best = RegretTracker::new(Some(&inst.values), k_total, 0.0).best().unwrap_or(0);
            let mut p = vec![0.0; n];
            p[best] = 1.0;
            Ok(outcome(run_baseline(inst, k_total, |_, _| best, &p, seed), 0, 0))
        }
        Algorithm::Uniform => {
            let p = vec![1.0 / n as f64; n];
            let trace = run_baseline(inst, k_total, |_, rng| rng.random_range(0..n), &p, seed);
            Ok(outcome(trace, 0, 0))
        }
        Algorithm::Exp3ExactFeatures | Algorithm::Glap => {
            let (table, episodes) = if cfg.algorithm == Algorithm::Exp3ExactFeatures {
                (FeatureTable::exact(&inst.mdp, &inst.policies), 0)
            } else {
                feature_table(cfg, inst, resolved, seed)?
            };
            // Estimation in the real environment is charged the largest
            // possible per-episode regret.
            let (oracle, live, offset) = match cfg.mode {
                Mode::Simulator => (episodes, 0, 0.0),
                Mode::Live => (0, episodes, episodes as f64 * inst.mdp.horizon() as f64),
            };
            let mut env = EpisodeRunner::new(&inst.mdp);
            let mut rng = stream_rng(seed, STREAM_PLAY);
            let trace = run_glap(
                &mut env,
                &inst.policies,
                &table,
                &resolved.glap,
                &inst.losses,
                Some(&inst.values),
                offset,
                &mut rng,
            )?;
            Ok(outcome(trace, oracle, live))
        }
    }
}

/// All seeds of an experiment, in config order.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub resolved: Option<Resolved>,
    pub num_policies: usize,
    pub results: Vec<(u64, SeedResult)>,
}

impl ExperimentReport {
    pub fn all_succeeded(&self) -> bool {
        self.results.iter().all(|(_, r)| r.is_ok())
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.results.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn final_regrets(&self) -> Vec<(u64, f64)> {
        self.outcomes().map(|o| (o.seed, o.final_regret())).collect()
    }
}

/// Runs every seed in parallel. Instance construction failures are recorded
/// against every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let inst = match build_instance(cfg) {
        Ok(inst) => inst,
        Err(e) => {
            let msg = format!("{e:#}");
            return Ok(ExperimentReport {
                resolved: None,
                num_policies: 0,
                results: cfg.seeds.iter().map(|&s| (s, Err(msg.clone()))).collect(),
            });
        }
    };
    let resolved = resolve(cfg, &inst.mdp, inst.policies.len());
    let results: Vec<(u64, SeedResult)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let r = run_seed(cfg, &inst, &resolved, seed).map_err(|e| format!("{e:#}"));
            if let Err(msg) = &r {
                log::error!("seed {seed} failed: {msg}");
            }
            (seed, r)
        })
        .collect();
    Ok(ExperimentReport { resolved: Some(resolved), num_policies: inst.policies.len(), results })
}

pub const SUMMARY_HEADER: &str = "row,status,algorithm,mode,K,num_policies,gamma,eps,final_regret,regret_offset,oracle_episodes,estimation_episodes,best_policy,jitter_events,bound_violations,error";

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Per-seed rows followed by `mean` and `median` rows over successful seeds.
pub fn summary_csv(cfg: &ExperimentConfig, report: &ExperimentReport) -> String {
    let (gamma, eps) = report.resolved.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.gamma, r.eps));
    let prefix = |row: &str, status: &str| {
        format!(
            "{row},{status},{},{},{},{},{gamma},{eps}",
            cfg.algorithm, cfg.mode, cfg.glap.k, report.num_policies
        )
    };
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for (seed, result) in &report.results {
        match result {
            Ok(o) => {
                let b = &o.trace.bounds;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},",
                    prefix(&seed.to_string(), "ok"),
                    o.final_regret(),
                    o.trace.regret_offset,
                    o.oracle_episodes,
                    o.estimation_episodes,
                    o.trace.best_policy.map_or(String::new(), |b| b.to_string()),
                    o.trace.jitter_events,
                    b.leverage_violations + b.estimate_violations + b.eta_v_violations,
                )
                .expect("writing to a string");
            }
            Err(msg) => {
                let clean = msg.replace([',', '\n'], ";");
                writeln!(out, "{},,,,,,,,{clean}", prefix(&seed.to_string(), "failed")).expect("writing to a string");
            }
        }
    }
    let mut regrets: Vec<f64> = report.outcomes().map(|o| o.final_regret()).collect();
    let mut oracle: Vec<f64> = report.outcomes().map(|o| o.oracle_episodes as f64).collect();
    let mut live: Vec<f64> = report.outcomes().map(|o| o.estimation_episodes as f64).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    writeln!(out, "{},{},,{},{},,,,", prefix("mean", "aggregate"), mean(&regrets), mean(&oracle), mean(&live))
        .expect("writing to a string");
    writeln!(
        out,
        "{},{},,{},{},,,,",
        prefix("median", "aggregate"),
        median(&mut regrets),
        median(&mut oracle),
        median(&mut live)
    )
    .expect("writing to a string");
    out
}

/// Writes `trace_seed<seed>.csv` per successful seed, `summary.csv` and
/// `config.txt` into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for o in report.outcomes() {
        let path = dir.join(format!("trace_seed{}.csv", o.seed));
        fs::write(&path, o.trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    fs::write(dir.join("summary.csv"), summary_csv(cfg, report)).context("writing summary.csv")?;
    let mut echo = cfg.echo();
    if let Some(r) = &report.resolved {
        writeln!(echo, "# resolved gamma = {}", r.gamma).expect("writing to a string");
        writeln!(echo, "# resolved eps = {}", r.eps).expect("writing to a string");
        writeln!(echo, "# preset clamped = eps:{} gamma:{}", r.preset.eps_clamped, r.preset.gamma_clamped)
            .expect("writing to a string");
    }
    echo.push_str("# experiment design (instances, adversaries, baselines, horizons) is defined by this harness\n");
    fs::write(dir.join("config.txt"), echo).context("writing config.txt")?;
    Ok(())
}
