use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use glap_bench::experiment::{build_instance, build_losses, build_mdp, build_policy_cover, resolve};
use glap_bench::report::{query_complexity_report, read_summary, sublinearity_report};
use glap_bench::{run_experiment, write_outputs, ExperimentConfig};
use glap_core::featureest::estimate_feature_visitations;
use glap_core::linalg::stream_rng;
use glap_core::mdp::{EpisodeRunner, Simulator};

#[derive(Parser)]
#[command(name = "glap-bench", about = "Linear adversarial MDP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, as `--key=value` or `key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes `mdp.json` to the output directory.
    GenMdp(Common),
    /// Writes `losses.json` for `glap.K` episodes.
    GenLosses(Common),
    /// Writes `cover.json`.
    BuildCover(Common),
    /// Writes `features_seed<seed>.json` for every seed.
    EstimateFeatures(Common),
    /// Runs every seed and writes traces, `summary.csv` and `config.txt`.
    Run(Common),
    /// Growth exponent between two run directories and oracle episode counts.
    Report {
        /// Output directory of the run at horizon K.
        #[arg(long)]
        k_dir: PathBuf,
        /// Output directory of the run at horizon 2K.
        #[arg(long)]
        k2_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
    },
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn estimate_features(cfg: &ExperimentConfig) -> Result<()> {
    let inst = build_instance(cfg)?;
    let resolved = resolve(cfg, &inst.mdp, inst.policies.len());
    for &seed in &cfg.seeds {
        let mut rng = stream_rng(seed, 1);
        let table = match cfg.mode {
            glap_bench::config::Mode::Simulator => estimate_feature_visitations(
                &mut Simulator::new(&inst.mdp),
                &inst.policies,
                &resolved.estimation,
                Some(seed),
                &mut rng,
            )?,
            glap_bench::config::Mode::Live => estimate_feature_visitations(
                &mut EpisodeRunner::new(&inst.mdp),
                &inst.policies,
                &resolved.estimation,
                Some(seed),
                &mut rng,
            )?,
        };
        println!("seed {seed}: {} episodes", table.total_episodes());
        write(&cfg.output_dir, &format!("features_seed{seed}.json"), &table.to_json())?;
    }
    Ok(())
}

fn report(k_dir: &Path, k2_dir: Option<&Path>, threshold: f64) -> Result<bool> {
    let short = read_summary(k_dir)?;
    let k = short.first().map_or(0, |r| r.k);
    let oracle: Vec<(u64, u64)> = short.iter().map(|r| (r.seed, r.oracle_episodes)).collect();
    println!("{}", query_complexity_report(k, &oracle));
    let Some(k2_dir) = k2_dir else { return Ok(true) };
    let long = read_summary(k2_dir)?;
    let k2 = long.first().map_or(0, |r| r.k);
    let oracle2: Vec<(u64, u64)> = long.iter().map(|r| (r.seed, r.oracle_episodes)).collect();
    println!("{}", query_complexity_report(k2, &oracle2));
    let regrets = |rows: &[glap_bench::report::SummaryRow]| -> Vec<(u64, f64)> {
        rows.iter().map(|r| (r.seed, r.final_regret)).collect()
    };
    let rep = sublinearity_report(&regrets(&short), &regrets(&long), threshold);
    println!("{rep}");
    Ok(rep.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = (|| -> Result<bool> {
        match cli.command {
            Command::GenMdp(c) => {
                let cfg = c.load()?;
                write(&cfg.output_dir, "mdp.json", &build_mdp(&cfg)?.to_json())?;
            }
            Command::GenLosses(c) => {
                let cfg = c.load()?;
                let mdp = build_mdp(&cfg)?;
                write(&cfg.output_dir, "losses.json", &build_losses(&cfg, &mdp)?.to_json())?;
            }
            Command::BuildCover(c) => {
                let cfg = c.load()?;
                let mdp = build_mdp(&cfg)?;
                write(&cfg.output_dir, "cover.json", &build_policy_cover(&cfg, &mdp)?.to_json())?;
            }
            Command::EstimateFeatures(c) => estimate_features(&c.load()?)?,
            Command::Run(c) => {
                let cfg = c.load()?;
                let rep = run_experiment(&cfg)?;
                write_outputs(&cfg, &rep, &cfg.output_dir)?;
                for (seed, r) in &rep.results {
                    match r {
                        Ok(o) => println!("seed {seed}: final regret {:.4}", o.final_regret()),
                        Err(e) => println!("seed {seed}: failed: {e}"),
                    }
                }
                return Ok(rep.all_succeeded());
            }
            Command::Report { k_dir, k2_dir, threshold } => return report(&k_dir, k2_dir.as_deref(), threshold),
        }
        Ok(true)
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
