//! Acceptance gate. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing the test harness's output capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use glap_bench::config::{Algorithm, ExperimentConfig, FeatureSourceKind, InitKind, Mode};
use glap_bench::report::{median, sublinearity_report};
use glap_bench::{run_experiment, write_outputs};
use glap_core::featureest::{certify_accuracy, estimate_feature_visitations};
use glap_core::glap::glap_init;
use glap_core::linalg::stream_rng;
use glap_core::mdp::{exact_visitation, make_random_mdp, value_from_visitation, Simulator};
use glap_core::optdesign::g_optimal_design;
use glap_core::policycover::{
    all_deterministic_policies, average_loss, best_policy_average, best_policy_brute_force, build_cover,
    policy_values,
};
use glap_core::{
    CoverMode, CoverSpec, DesignOptions, EstimationConfig, FeatureTable, GlapConfig, InitialState, LinearMdp,
    LossSequence, Policy, PolicyCover,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn gate(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let within = elapsed <= limit;
    let ok = pass && within;
    let line = format!(
        "{} [{id}] {name}: {detail} ({:.1}s, limit {}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    std::io::stderr().write_all(line.as_bytes()).expect("stderr");
    assert!(ok, "{}", line.trim_end());
}

fn random_instance(rng: &mut ChaCha8Rng, seed: u64) -> (LinearMdp, Vec<Policy>) {
    let states = rng.random_range(2..=6);
    let actions = rng.random_range(2..=4);
    let horizon = rng.random_range(1..=3);
    let dim = rng.random_range(2..=6usize).min(states * actions);
    let mdp = make_random_mdp(states, actions, horizon, dim, seed)
        .unwrap()
        .with_initial(InitialState::uniform(states))
        .unwrap();
    let spec = CoverSpec {
        dim,
        horizon,
        eps_prime: 1.0,
        budget: rng.random_range(dim..=40),
        mode: CoverMode::Random,
        seed,
        temperature: rng.random_range(0.5..20.0),
    };
    let policies = build_cover(spec).unwrap().materialize(&mdp).unwrap();
    (mdp, policies)
}

fn random_log_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-8.0..8.0)).collect()
}

#[test]
fn c1_trace_identity() {
    let start = Instant::now();
    let mut rng = stream_rng(101, 0);
    let (mut checked, mut worst, mut seed) = (0, 0.0f64, 0u64);
    while checked < 100 {
        seed += 1;
        let (mdp, policies) = random_instance(&mut rng, seed);
        let table = FeatureTable::exact(&mdp, &policies);
        let mut state = glap_init(&table, &GlapConfig::new(rng.random_range(0.01..0.5), 0.05, 1000)).unwrap();
        state.set_log_weights(random_log_weights(policies.len(), &mut rng)).unwrap();
        let p = state.probabilities().to_vec();
        let d = mdp.dim();
        let mut full_rank = false;
        for h in 0..mdp.horizon() {
            let phis = table.step(h);
            let mut sigma = DMatrix::zeros(d, d);
            for (w, v) in p.iter().zip(&phis) {
                sigma += *w * v * v.transpose();
            }
            // LU rather than `try_inverse`, which uses cofactor formulas up to 4x4.
            let lu = sigma.clone().lu();
            if !lu.is_invertible() || state.rank(h) < d {
                continue;
            }
            full_rank = true;
            let dense: f64 = p.iter().zip(&phis).map(|(w, v)| w * v.dot(&lu.solve(v).unwrap())).sum();
            let solver: f64 = (0..p.len()).map(|i| p[i] * state.leverage(i, h)).sum();
            worst = worst.max((dense - d as f64).abs()).max((solver - d as f64).abs());
        }
        if full_rank {
            checked += 1;
        }
    }
    gate(
        1,
        "trace identity",
        worst <= 1e-8,
        start.elapsed(),
        Duration::from_secs(10),
        format!("{checked} configurations, max |sum p lev - d| = {worst:.2e}"),
    );
}

#[test]
fn c2_design_certificate() {
    let start = Instant::now();
    let mut rng = stream_rng(202, 0);
    let (mut worst_ratio, mut support_ok, mut failures) = (0.0f64, true, 0);
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=200);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let vectors: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0)))
            .collect();
        let Ok(g) = g_optimal_design(&vectors, DesignOptions::with_tol(0.01)) else {
            failures += 1;
            continue;
        };
        let mut v = DMatrix::zeros(d, d);
        for (w, x) in g.weights.iter().zip(&vectors) {
            v += *w * x * x.transpose();
        }
        let svd = v.clone().svd(true, true);
        let cutoff = 1e-10 * svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        let pinv = svd.pseudo_inverse(cutoff).unwrap();
        let max_lev = vectors.iter().map(|x| (x.transpose() * &pinv * x)[0]).fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(max_lev / rank as f64);
        let support = g.weights.iter().filter(|&&w| w > 0.0).count();
        support_ok &= rank == g.rank && support <= d * (d + 1) / 2 + 1;
    }
    gate(
        2,
        "G-optimal certificate",
        failures == 0 && worst_ratio <= 1.01 && support_ok,
        start.elapsed(),
        Duration::from_secs(60),
        format!("200 sets, max leverage / rank = {worst_ratio:.5}, support bound held: {support_ok}, solver errors {failures}"),
    );
}

#[test]
fn c3_estimator_unbiased() {
    let start = Instant::now();
    let mut rng = stream_rng(303, 0);
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (mdp, policies) = random_instance(&mut rng, 1000 + seed);
        let table = FeatureTable::exact(&mdp, &policies);
        let mut state = glap_init(&table, &GlapConfig::new(rng.random_range(0.01..0.5), 0.05, 1000)).unwrap();
        state.set_log_weights(random_log_weights(policies.len(), &mut rng)).unwrap();
        let p = state.probabilities().to_vec();
        for h in 0..mdp.horizon() {
            let theta = DVector::from_fn(mdp.dim(), |_, _| rng.random_range(-1.0..1.0));
            let phis = table.step(h);
            // Average the single-sample estimator over the draw of the played policy.
            let mut mean_theta = DVector::zeros(mdp.dim());
            for (j, w) in p.iter().enumerate() {
                mean_theta += *w * state.theta_hat(h, j, phis[j].dot(&theta));
            }
            let closed_form = state.expected_estimates(h, &phis, &theta);
            for (i, phi) in phis.iter().enumerate() {
                let truth = phi.dot(&theta);
                worst = worst.max((phi.dot(&mean_theta) - truth).abs()).max((closed_form[i] - truth).abs());
            }
        }
    }
    gate(
        3,
        "estimator unbiasedness",
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(10),
        format!("100 hedge states, max |E[l_hat] - l| = {worst:.2e}"),
    );
}

fn base_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig { output_dir: dir.to_path_buf(), ..ExperimentConfig::default() }
}

fn bounds_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = base_config(dir);
    cfg.mdp.seed = 4;
    cfg.cover.temperature = Some(10.0);
    cfg.glap.k = 2000;
    cfg.algorithm = Algorithm::Glap;
    cfg.features.source = FeatureSourceKind::Estimated;
    cfg.mode = Mode::Simulator;
    cfg.seeds = vec![0, 1, 2];
    cfg
}

#[test]
fn c4_magnitude_bounds() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = bounds_config(dir.path());
    let rep = run_experiment(&cfg).unwrap();
    let mut pass = rep.all_succeeded() && rep.num_policies == 30;
    let (mut lev, mut est, mut eta) = (0.0f64, 0.0f64, 0.0f64);
    for o in rep.outcomes() {
        let b = &o.trace.bounds;
        pass &= b.clean() && b.eta_v_checked;
        lev = lev.max(b.max_leverage_ratio);
        est = est.max(b.max_estimate_ratio);
        eta = eta.max(b.max_abs_eta_v);
    }
    gate(
        4,
        "magnitude bounds",
        pass,
        start.elapsed(),
        Duration::from_secs(60),
        format!("K=2000, 3 runs, max leverage/(dH/gamma) = {lev:.3}, max |l_hat|/(dH/gamma) = {est:.3}, max |eta V| = {eta:.3}"),
    );
}

/// Tabular instance with `S=4, A=2, H=3, d=8`, uniform start, and 20 softmax policies.
fn estimation_instance() -> (LinearMdp, PolicyCover) {
    let mdp = make_random_mdp(4, 2, 3, 8, 5).unwrap().with_initial(InitialState::uniform(4)).unwrap();
    let spec = CoverSpec { dim: 8, horizon: 3, eps_prime: 1.0, budget: 20, mode: CoverMode::Random, seed: 5, temperature: 3.0 };
    (mdp, build_cover(spec).unwrap())
}

#[test]
fn c5_feature_estimation_accuracy() {
    let start = Instant::now();
    let (mdp, cover) = estimation_instance();
    let policies = cover.materialize(&mdp).unwrap();
    let cfg = EstimationConfig { eps: 0.1, delta: 0.05, ..EstimationConfig::default() };
    let (mut passed, mut worst, mut episodes) = (0, 0.0f64, Vec::new());
    for seed in 0..40 {
        let mut env = Simulator::new(&mdp);
        let table =
            estimate_feature_visitations(&mut env, &policies, &cfg, Some(seed), &mut stream_rng(seed, 1)).unwrap();
        let report = certify_accuracy(&table, &mdp, &policies, cfg.eps);
        worst = worst.max(report.max_error());
        passed += usize::from(report.passed());
        episodes.push(table.total_episodes() as f64);
    }
    gate(
        5,
        "feature estimation accuracy",
        passed * 100 >= 95 * 40,
        start.elapsed(),
        Duration::from_secs(600),
        format!(
            "{passed}/40 seeds within eps/sqrt(d) = {:.4}, worst error {worst:.4}, median episodes {:.3e}",
            0.1 / 8f64.sqrt(),
            median(&episodes).unwrap()
        ),
    );
}

#[test]
fn c6_average_mdp_reduction() {
    let start = Instant::now();
    let mut rng = stream_rng(606, 0);
    let (mut agree, mut worst) = (0, 0.0f64);
    for seed in 0..50 {
        let states = rng.random_range(1..=3);
        let actions = rng.random_range(1..=2);
        let horizon = rng.random_range(1..=2);
        let mdp = make_random_mdp(states, actions, horizon, states * actions, 600 + seed).unwrap();
        let mdp = if rng.random_bool(0.5) { mdp.with_initial(InitialState::uniform(states)).unwrap() } else { mdp };
        let thetas = (0..20)
            .map(|_| {
                (0..horizon)
                    .map(|_| DVector::from_fn(mdp.dim(), |_, _| rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let losses = LossSequence::normalized(&mdp, thetas).unwrap();
        let policies = all_deterministic_policies(states, actions, horizon);
        let brute = best_policy_brute_force(&mdp, &losses, &policies).unwrap();
        let avg = best_policy_average(&mdp, &losses, &policies).unwrap();
        agree += usize::from(brute.0 == avg.0);
        let mean = average_loss(&losses);
        for (p, row) in policies.iter().zip(policy_values(&mdp, &policies, &losses)) {
            let total: f64 = row.iter().sum();
            let averaged = 20.0 * value_from_visitation(&exact_visitation(&mdp, p).phi_pi, &mean);
            worst = worst.max((total - averaged).abs());
        }
    }
    gate(
        6,
        "average-MDP reduction",
        agree == 50 && worst <= 1e-8,
        start.elapsed(),
        Duration::from_secs(60),
        format!("argmin agreed on {agree}/50, max |sum V - K V_avg| = {worst:.2e}"),
    );
}

/// Drift instance used for the growth-exponent comparison.
fn regret_config(dir: &Path, algorithm: Algorithm, k: usize) -> ExperimentConfig {
    let mut cfg = base_config(dir);
    cfg.mdp.states = 3;
    cfg.mdp.actions = 8;
    cfg.mdp.horizon = 3;
    cfg.mdp.dim = 4;
    cfg.mdp.seed = 1;
    cfg.mdp.init = InitKind::Fixed;
    cfg.adversary.omega = 1e-5;
    cfg.cover.budget = 30;
    cfg.cover.temperature = Some(200.0);
    cfg.algorithm = algorithm;
    cfg.features.source = FeatureSourceKind::Exact;
    cfg.mode = Mode::Simulator;
    cfg.glap.k = k;
    cfg.seeds = (0..10).collect();
    cfg
}

#[test]
fn c7_sublinear_regret() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |alg, k| {
        let rep = run_experiment(&regret_config(dir.path(), alg, k)).unwrap();
        assert!(rep.all_succeeded());
        rep.final_regrets()
    };
    let (glap_k, glap_2k) = (run(Algorithm::Glap, 10_000), run(Algorithm::Glap, 20_000));
    let (uni_k, uni_2k) = (run(Algorithm::Uniform, 10_000), run(Algorithm::Uniform, 20_000));
    let glap = sublinearity_report(&glap_k, &glap_2k, 0.95);
    let uniform = sublinearity_report(&uni_k, &uni_2k, 0.95);
    let med = |v: &[(u64, f64)]| median(&v.iter().map(|x| x.1).collect::<Vec<_>>()).unwrap();
    let ratio = med(&uni_2k) / med(&glap_2k);
    let (ag, au) = (glap.median.unwrap_or(f64::NAN), uniform.median.unwrap_or(f64::NAN));
    gate(
        7,
        "sublinear regret",
        ag <= 0.95 && au >= 0.9 && ratio >= 3.0,
        start.elapsed(),
        Duration::from_secs(900),
        format!("median alpha glap {ag:.3}, uniform {au:.3}; uniform/glap regret at K=20000 = {ratio:.2}"),
    );
}

fn oracle_config(dir: &Path, k: usize) -> ExperimentConfig {
    let (mdp, cover) = estimation_instance();
    let mdp_path = dir.join("mdp.json");
    let cover_path = dir.join("cover.json");
    std::fs::write(&mdp_path, mdp.to_json()).unwrap();
    std::fs::write(&cover_path, cover.to_json()).unwrap();
    let mut cfg = base_config(dir);
    cfg.mdp.file = Some(mdp_path);
    cfg.mdp.init = InitKind::Uniform;
    cfg.cover.file = Some(cover_path);
    cfg.algorithm = Algorithm::Glap;
    cfg.features.source = FeatureSourceKind::Estimated;
    cfg.mode = Mode::Simulator;
    cfg.glap.k = k;
    cfg.seeds = vec![0, 1, 2];
    cfg
}

#[test]
fn c8_oracle_scaling() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let episodes = |k| {
        let rep = run_experiment(&oracle_config(dir.path(), k)).unwrap();
        assert!(rep.all_succeeded());
        median(&rep.outcomes().map(|o| o.oracle_episodes as f64).collect::<Vec<_>>()).unwrap()
    };
    let (short, long) = (episodes(5_000), episodes(10_000));
    let ratio = long / short;
    gate(
        8,
        "oracle scaling",
        (3.0..=5.0).contains(&ratio),
        start.elapsed(),
        Duration::from_secs(900),
        format!("median oracle episodes {short:.3e} at K=5000, {long:.3e} at K=10000, ratio {ratio:.3}"),
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn c9_determinism() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let configs: Vec<(&str, Box<dyn Fn(&Path) -> ExperimentConfig>)> = vec![
        ("bounds", Box::new(bounds_config)),
        ("regret", Box::new(|d: &Path| regret_config(d, Algorithm::Glap, 2000))),
        ("uniform", Box::new(|d: &Path| regret_config(d, Algorithm::Uniform, 2000))),
        ("oracle", Box::new(|d: &Path| oracle_config(d, 2000))),
    ];
    let mut identical = true;
    let mut compared = 0;
    for (name, make) in &configs {
        let mut outputs = Vec::new();
        for rerun in 0..2 {
            let dir = root.path().join(format!("{name}{rerun}"));
            std::fs::create_dir_all(&dir).unwrap();
            let cfg = make(&dir);
            let rep = run_experiment(&cfg).unwrap();
            write_outputs(&cfg, &rep, &dir).unwrap();
            outputs.push(files(&dir));
        }
        compared += outputs[0].len();
        identical &= !outputs[0].is_empty() && outputs[0] == outputs[1];
    }
    gate(
        9,
        "determinism",
        identical,
        start.elapsed(),
        Duration::from_secs(900),
        format!("{compared} CSV files over 4 pipelines compared byte for byte: identical = {identical}"),
    );
}
