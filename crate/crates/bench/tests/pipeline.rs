use std::path::Path;
use std::process::Command;

use glap_bench::config::{Algorithm, ConfigError, ExperimentConfig, FeatureSourceKind, Mode};
use glap_bench::experiment::{build_instance, summary_csv};
use glap_bench::report::{median, query_complexity_report, sublinearity_report};
use glap_bench::{run_experiment, write_outputs};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { output_dir: dir.to_path_buf(), ..ExperimentConfig::default() };
    cfg.mdp.states = 3;
    cfg.mdp.actions = 2;
    cfg.mdp.horizon = 2;
    cfg.mdp.dim = 3;
    cfg.cover.budget = 6;
    cfg.cover.temperature = Some(20.0);
    cfg.glap.k = 500;
    cfg.seeds = vec![0, 1, 2];
    cfg
}

#[test]
fn config_file_and_overrides() {
    let text = "# comment\nmdp.S = 8\nglap.gamma = 0.05 # trailing comment\nseeds = 0..4\nalgorithm = uniform\n\n";
    let mut cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.mdp.states, 8);
    assert_eq!(cfg.glap.gamma, Some(0.05));
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3]);
    assert_eq!(cfg.algorithm, Algorithm::Uniform);
    cfg.apply_override("--glap.gamma=auto").unwrap();
    assert_eq!(cfg.glap.gamma, None);
    cfg.apply_override("mode=live").unwrap();
    assert_eq!(cfg.mode, Mode::Live);
    // The echo parses back to the same configuration.
    assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
}

#[test]
fn unknown_and_malformed_keys_are_errors() {
    assert_eq!(ExperimentConfig::parse("mdp.SS = 3").unwrap_err(), ConfigError::UnknownKey("mdp.SS".into()));
    assert!(matches!(ExperimentConfig::parse("glap.K = x").unwrap_err(), ConfigError::BadValue { .. }));
    assert!(matches!(ExperimentConfig::parse("just words").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
    let cfg = ExperimentConfig::parse("glap.K = 0").unwrap();
    assert!(cfg.validate().is_err());
    assert!(ExperimentConfig::parse("seeds = 1,1").unwrap().validate().is_err());
}

#[test]
fn best_fixed_oracle_has_zero_regret() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.algorithm = Algorithm::BestFixedOracle;
    let rep = run_experiment(&cfg).unwrap();
    for o in rep.outcomes() {
        assert!(o.trace.records.iter().all(|r| r.cum_regret == 0.0));
    }
    let regrets = rep.final_regrets();
    let alpha = sublinearity_report(&regrets, &regrets, 0.95);
    assert_eq!(alpha.excluded.len(), 3);
}

#[test]
fn uniform_regret_slope_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.algorithm = Algorithm::Uniform;
    cfg.glap.k = 4000;
    cfg.seeds = (0..10).collect();
    let inst = build_instance(&cfg).unwrap();
    let n = inst.policies.len() as f64;
    let totals: Vec<f64> = inst.values.iter().map(|r| r.iter().sum()).collect();
    let best = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let best_idx = totals.iter().position(|&t| t == best).unwrap();
    // Expected regret and its per-seed variance, from the exact values.
    let (mut expected, mut var) = (0.0, 0.0);
    for k in 0..cfg.glap.k {
        let gaps: Vec<f64> = inst.values.iter().map(|r| r[k] - inst.values[best_idx][k]).collect();
        let mean = gaps.iter().sum::<f64>() / n;
        expected += mean;
        var += gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    }
    let rep = run_experiment(&cfg).unwrap();
    let regrets: Vec<f64> = rep.final_regrets().iter().map(|r| r.1).collect();
    let mean = regrets.iter().sum::<f64>() / regrets.len() as f64;
    let tol = 4.0 * (var / regrets.len() as f64).sqrt();
    assert!(expected > 0.0);
    assert!((mean - expected).abs() <= tol, "mean {mean}, expected {expected}, tol {tol}");
}

#[test]
fn uniform_growth_exponent_is_near_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = |k| {
        let mut cfg = small(dir.path());
        cfg.algorithm = Algorithm::Uniform;
        cfg.adversary.kind = glap_bench::config::AdversaryKind::Fixed;
        cfg.glap.k = k;
        cfg.seeds = (0..10).collect();
        run_experiment(&cfg).unwrap().final_regrets()
    };
    let rep = sublinearity_report(&run(2000), &run(4000), 0.95);
    let alpha = rep.median.unwrap();
    assert!((alpha - 1.0).abs() <= 0.1, "alpha {alpha}");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let root = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for rerun in 0..2 {
        let dir = root.path().join(rerun.to_string());
        let cfg = small(&dir);
        let rep = run_experiment(&cfg).unwrap();
        write_outputs(&cfg, &rep, &dir).unwrap();
        let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
        texts.push((read("trace_seed0.csv"), read("trace_seed2.csv"), read("summary.csv")));
    }
    assert_eq!(texts[0], texts[1]);
    assert_ne!(texts[0].0, texts[0].1, "different seeds should differ");
}

#[test]
fn live_mode_charges_estimation_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.mdp.dim = 2;
    cfg.cover.budget = 4;
    cfg.glap.eps = Some(0.5);
    cfg.glap.k = 50;
    cfg.mode = Mode::Live;
    cfg.seeds = vec![0];
    let inst = build_instance(&cfg).unwrap();
    let rep = run_experiment(&cfg).unwrap();
    let o = rep.outcomes().next().expect("seed succeeded");
    assert!(o.estimation_episodes > 0);
    assert_eq!(o.oracle_episodes, 0);
    let charge = o.estimation_episodes as f64 * cfg.mdp.horizon as f64;
    assert_eq!(o.trace.regret_offset, charge);
    let first = &o.trace.records[0];
    let best = o.trace.best_policy.unwrap();
    let gap = inst.values[first.chosen_policy][0] - inst.values[best][0];
    assert!((first.cum_regret - charge - gap).abs() < 1e-9);

    cfg.mode = Mode::Simulator;
    let sim = run_experiment(&cfg).unwrap();
    let s = sim.outcomes().next().unwrap();
    assert_eq!(s.estimation_episodes, 0);
    assert!(s.oracle_episodes > 0);
    assert_eq!(s.trace.regret_offset, 0.0);
}

#[test]
fn single_step_horizon_needs_no_oracle_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.mdp.horizon = 1;
    let rep = run_experiment(&cfg).unwrap();
    let counts: Vec<(u64, u64)> = rep.outcomes().map(|o| (o.seed, o.oracle_episodes)).collect();
    assert_eq!(counts.len(), 3);
    assert_eq!(query_complexity_report(cfg.glap.k, &counts).median_episodes, Some(0.0));
}

#[test]
fn exact_features_do_not_lose_to_estimated_features() {
    let dir = tempfile::tempdir().unwrap();
    let run = |alg| {
        let mut cfg = small(dir.path());
        cfg.mdp.states = 4;
        cfg.mdp.actions = 3;
        cfg.mdp.dim = 4;
        cfg.cover.budget = 10;
        cfg.algorithm = alg;
        cfg.features.source = FeatureSourceKind::Estimated;
        cfg.glap.gamma = Some(0.1);
        cfg.glap.eps = Some(0.3);
        cfg.glap.k = 3000;
        cfg.seeds = (0..10).collect();
        let rep = run_experiment(&cfg).unwrap();
        assert!(rep.all_succeeded());
        median(&rep.final_regrets().iter().map(|r| r.1).collect::<Vec<_>>()).unwrap()
    };
    let exact = run(Algorithm::Exp3ExactFeatures);
    let estimated = run(Algorithm::Glap);
    assert!(exact <= estimated, "exact {exact}, estimated {estimated}");
}

#[test]
fn failing_seeds_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.mdp.file = Some(dir.path().join("missing.json"));
    let rep = run_experiment(&cfg).unwrap();
    assert!(!rep.all_succeeded());
    let csv = summary_csv(&cfg, &rep);
    assert_eq!(csv.lines().filter(|l| l.contains(",failed,")).count(), 3);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_glap-bench")).args(args).output().unwrap()
}

#[test]
fn cli_verbs_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, "mdp.S = 3\nmdp.A = 2\nmdp.H = 2\nmdp.d = 3\ncover.budget = 5\nglap.K = 200\nseeds = 0..2\n").unwrap();
    let cfg = cfg_path.to_str().unwrap();
    for verb in ["gen-mdp", "gen-losses", "build-cover", "estimate-features", "run"] {
        let o = cli(&[verb, "--config", cfg, &format!("--output.dir={out}")]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["mdp.json", "losses.json", "cover.json", "features_seed0.json", "trace_seed1.csv", "summary.csv", "config.txt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let o = cli(&["report", "--k-dir", out]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("K = 200"));

    // Generated artifacts can be fed back in.
    let mdp = dir.path().join("mdp.json");
    let o = cli(&["run", "--config", cfg, &format!("--output.dir={out}/again"), &format!("--mdp.file={}", mdp.display())]);
    assert!(o.status.success());

    let bad = cli(&["run", "--config", cfg, "--glap.KK=3"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown key"));
    let failing = cli(&["run", "--config", cfg, &format!("--output.dir={out}/fail"), "--mdp.file=/nonexistent.json"]);
    assert!(!failing.status.success());
}

#[test]
fn shipped_config_parses() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/drift.cfg")).unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.mdp.actions, 8);
    assert_eq!(cfg.seeds.len(), 10);
}
