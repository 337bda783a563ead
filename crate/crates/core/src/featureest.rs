//! Estimation of per-policy feature visitations `phi_{pi,h}` from
//! exploration episodes.
//!
//! Step by step, exploration data is collected until the ridge covariance
//! `Lambda_h` makes every current estimate `phi_hat_{pi,h}` well determined
//! (`max ||phi_hat||^2_{Lambda_h^{-1}} <= eps_exp`) and its smallest
//! eigenvalue clears a floor. The estimates are then pushed one step forward
//! through the least-squares transition operator
//! `T_hat = (sum_tau phi_{pi,h+1}(s') phi(s,a)') Lambda_h^{-1}`.
//!
//! The data at step `h` is kept as counts `n(s, a, s')`, which are sufficient
//! for both `Lambda_h` and `T_hat`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::mdp::{exact_visitation, Environment, InitialState, LinearMdp, Policy};
use crate::optdesign::{g_optimal_design, DesignError, DesignOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "episode budget exhausted at step {step} after {episodes} episodes: \
         max leverage {max_leverage:.3e} (target {target_leverage:.3e}), \
         lambda_min {lambda_min:.3e} (floor {floor:.3e})"
    )]
    BudgetExhausted {
        step: usize,
        episodes: u64,
        max_leverage: f64,
        target_leverage: f64,
        lambda_min: f64,
        floor: f64,
    },
    #[error("covariance at step {0} is not positive definite")]
    Singular(usize),
    #[error("design over step {step} estimates failed: {source}")]
    Design { step: usize, source: DesignError },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature table json: {0}")]
    Serde(String),
}

/// `log(4 H^2 d |Pi| / delta)`, shared by the accuracy target and the floor.
pub fn log_term(dim: usize, horizon: usize, num_policies: usize, delta: f64) -> f64 {
    (4.0 * (horizon * horizon * dim * num_policies) as f64 / delta).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Target accuracy: `||phi_hat - phi|| <= eps / sqrt(d)`.
    pub eps: f64,
    pub delta: f64,
    /// Cap on episodes per step, warm-up included.
    pub budget: u64,
    /// Uniform-action episodes collected before the first design.
    pub warmup: u64,
    /// Override for the eigenvalue floor. `None` uses `log_term`.
    pub floor: Option<f64>,
    /// Override for the leverage target. `None` uses `eps^2 / (d^3 beta)`.
    pub eps_exp: Option<f64>,
    /// Fraction of each batch played with the uniform policy.
    pub perturb: f64,
    /// Smallest batch collected between stopping checks.
    pub redesign_every: u64,
    pub design_tol: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            delta: 0.05,
            budget: 1 << 40,
            warmup: 50,
            floor: None,
            eps_exp: None,
            perturb: 0.1,
            redesign_every: 25,
            design_tol: 0.01,
        }
    }
}

impl EstimationConfig {
    pub fn beta(&self, dim: usize, horizon: usize, num_policies: usize) -> f64 {
        16.0 * (horizon * horizon) as f64 * log_term(dim, horizon, num_policies, self.delta)
    }

    /// Leverage target for each step's collection.
    pub fn eps_exp(&self, dim: usize, horizon: usize, num_policies: usize) -> f64 {
        self.eps_exp.unwrap_or_else(|| {
            self.eps * self.eps / ((dim as f64).powi(3) * self.beta(dim, horizon, num_policies))
        })
    }

    pub fn lambda_floor(&self, dim: usize, horizon: usize, num_policies: usize) -> f64 {
        self.floor
            .unwrap_or_else(|| log_term(dim, horizon, num_policies, self.delta))
    }

    fn check(&self) -> Result<(), EstimationError> {
        if !(self.eps > 0.0 && self.eps <= 0.5) {
            return Err(EstimationError::Config(format!("eps must be in (0, 1/2], got {}", self.eps)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(EstimationError::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if self.budget == 0 {
            return Err(EstimationError::Config("budget must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.perturb) {
            return Err(EstimationError::Config(format!("perturb must be in [0, 1), got {}", self.perturb)));
        }
        if let Some(e) = self.eps_exp {
            if !(e > 0.0) {
                return Err(EstimationError::Config(format!("eps_exp must be positive, got {e}")));
            }
        }
        Ok(())
    }
}

/// Exploration data for one step index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationData {
    pub step: usize,
    num_states: usize,
    num_actions: usize,
    /// `counts[(s * A + a) * S + s']`.
    counts: Vec<u64>,
    /// `sum phi phi' + I / d`.
    lambda: DMatrix<f64>,
    episodes: u64,
}

impl ExplorationData {
    pub fn new(step: usize, num_states: usize, num_actions: usize, dim: usize) -> Self {
        Self {
            step,
            num_states,
            num_actions,
            counts: vec![0; num_states * num_actions * num_states],
            lambda: DMatrix::identity(dim, dim) / dim as f64,
            episodes: 0,
        }
    }

    /// Adds transition counts laid out as `(s * A + a) * S + s'`.
    pub fn add_counts(&mut self, counts: &[u64], features: &[DVector<f64>]) {
        assert_eq!(counts.len(), self.counts.len(), "count table has wrong length");
        let ns = self.num_states;
        for (pair, phi) in features.iter().enumerate() {
            let row = &counts[pair * ns..(pair + 1) * ns];
            let n: u64 = row.iter().sum();
            if n > 0 {
                self.lambda.ger(n as f64, phi, phi, 1.0);
                self.episodes += n;
            }
        }
        for (c, &n) in self.counts.iter_mut().zip(counts) {
            *c += n;
        }
    }

    /// Records a single transition `(s, a, s')`.
    pub fn add_transition(&mut self, s: usize, a: usize, next: usize, features: &[DVector<f64>]) {
        let mut counts = vec![0; self.counts.len()];
        counts[(s * self.num_actions + a) * self.num_states + next] = 1;
        self.add_counts(&counts, features);
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn lambda_min(&self) -> f64 {
        linalg::min_eigenvalue(&self.lambda)
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>, EstimationError> {
        Cholesky::new(self.lambda.clone()).ok_or(EstimationError::Singular(self.step))
    }

    /// `max_i ||v_i||^2_{Lambda^{-1}}`.
    pub fn max_leverage(&self, vectors: &[DVector<f64>]) -> Result<f64, EstimationError> {
        let chol = self.cholesky()?;
        Ok(vectors
            .iter()
            .map(|v| linalg::leverage(&chol, v))
            .fold(0.0, f64::max))
    }
}

/// `phi_{pi,h}(s) = sum_a pi_h(a|s) phi(s,a)` for every state.
fn state_features(policy: &Policy, h: usize, features: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let na = policy.num_actions();
    (0..policy.num_states())
        .map(|s| {
            let mut out = DVector::zeros(features[0].len());
            for (a, &p) in policy.row(h, s).iter().enumerate() {
                if p != 0.0 {
                    out.axpy(p, &features[s * na + a], 1.0);
                }
            }
            out
        })
        .collect()
}

/// Least-squares operator carrying `phi_{pi,h}` to `phi_{pi,h+1}`:
/// `(sum n(s,a,s') phi_{pi,h+1}(s') phi(s,a)') Lambda_h^{-1}`.
pub fn estimate_transition_operator(
    data: &ExplorationData,
    policy: &Policy,
    features: &[DVector<f64>],
) -> Result<DMatrix<f64>, EstimationError> {
    let d = data.lambda.nrows();
    let ns = data.num_states;
    let next = state_features(policy, data.step + 1, features);
    let mut cross = DMatrix::zeros(d, d);
    for (pair, phi) in features.iter().enumerate() {
        let mut target = DVector::zeros(d);
        let mut any = false;
        for (sp, &n) in data.counts[pair * ns..(pair + 1) * ns].iter().enumerate() {
            if n > 0 {
                target.axpy(n as f64, &next[sp], 1.0);
                any = true;
            }
        }
        if any {
            cross.ger(1.0, &target, phi, 1.0);
        }
    }
    let chol = data.cholesky()?;
    // cross * Lambda^{-1} = (Lambda^{-1} cross')'
    Ok(chol.solve(&cross.transpose()).transpose())
}

/// `T_hat phi_hat` without forming the operator.
fn propagate(
    data: &ExplorationData,
    chol: &Cholesky<f64, Dyn>,
    policy: &Policy,
    features: &[DVector<f64>],
    phi_hat: &DVector<f64>,
) -> DVector<f64> {
    let ns = data.num_states;
    let x = chol.solve(phi_hat);
    let next = state_features(policy, data.step + 1, features);
    let mut mass = vec![0.0; ns];
    for (pair, phi) in features.iter().enumerate() {
        let c = phi.dot(&x);
        if c == 0.0 {
            continue;
        }
        for (sp, &n) in data.counts[pair * ns..(pair + 1) * ns].iter().enumerate() {
            if n > 0 {
                mass[sp] += n as f64 * c;
            }
        }
    }
    let mut out = DVector::zeros(phi_hat.len());
    for (m, v) in mass.iter().zip(&next) {
        if *m != 0.0 {
            out.axpy(*m, v, 1.0);
        }
    }
    out
}

/// Stopping targets for one step's collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionTargets {
    pub eps_exp: f64,
    pub lambda_floor: f64,
    pub budget: u64,
    pub warmup: u64,
    pub perturb: f64,
    pub min_batch: u64,
    pub design_tol: f64,
}

impl CollectionTargets {
    pub fn from_config(cfg: &EstimationConfig, dim: usize, horizon: usize, num_policies: usize) -> Self {
        Self {
            eps_exp: cfg.eps_exp(dim, horizon, num_policies),
            lambda_floor: cfg.lambda_floor(dim, horizon, num_policies),
            budget: cfg.budget,
            warmup: cfg.warmup,
            perturb: cfg.perturb,
            min_batch: cfg.redesign_every.max(1),
            design_tol: cfg.design_tol,
        }
    }
}

/// Relative slack on the eigenvalue floor comparison.
const FLOOR_SLACK: f64 = 1e-12;
/// Overshoot factor on the predicted episode count.
const BATCH_OVERSHOOT: f64 = 1.02;
/// Largest growth of the total episode count in one round.
const MAX_GROWTH: f64 = 4.0;

/// Collects step-`h` exploration data until
/// `max_i ||phis_i||^2_{Lambda_h^{-1}} <= eps_exp` and
/// `lambda_min(Lambda_h) >= lambda_floor`.
///
/// After a uniform-action warm-up, one G-optimal design over `phis` fixes a
/// mixture over `policies` (plus a `perturb` share of the uniform policy).
/// Batches are drawn from that mixture; each batch size is the count the
/// current statistics predict for reaching both targets, so the number of
/// stopping checks stays logarithmic in the final episode count.
pub fn collect_exploration_data(
    env: &mut dyn Environment,
    h: usize,
    phis: &[DVector<f64>],
    policies: &[Policy],
    targets: &CollectionTargets,
    rng: &mut dyn RngCore,
) -> Result<ExplorationData, EstimationError> {
    let (ns, na, horizon, d) = env.mdp_shape();
    if h + 1 >= horizon {
        return Err(EstimationError::Shape(format!("step {h} has no successor in horizon {horizon}")));
    }
    if phis.len() != policies.len() {
        return Err(EstimationError::Shape("one estimate per policy is required".into()));
    }
    let features = env.features().to_vec();
    let uniform = Policy::uniform(ns, na, horizon);
    let mut data = ExplorationData::new(h, ns, na, d);

    let warm = targets.warmup.min(targets.budget);
    if warm > 0 {
        let counts = env.step_transition_counts(&uniform, h, warm, rng);
        data.add_counts(&counts, &features);
    }

    let mut mixture: Option<Vec<f64>> = None;
    loop {
        let lev = data.max_leverage(phis)?;
        let lmin = data.lambda_min();
        let floor_ok = lmin >= targets.lambda_floor * (1.0 - FLOOR_SLACK);
        if lev <= targets.eps_exp && floor_ok {
            return Ok(data);
        }
        let used = data.episodes();
        if used >= targets.budget {
            return Err(EstimationError::BudgetExhausted {
                step: h,
                episodes: used,
                max_leverage: lev,
                target_leverage: targets.eps_exp,
                lambda_min: lmin,
                floor: targets.lambda_floor,
            });
        }
        let q = match &mixture {
            Some(q) => q,
            None => mixture.insert(design_mixture(phis, targets, h)?),
        };

        // Leverages and sample eigenvalues scale like 1/n and n.
        let base = used.max(1) as f64;
        let reg = 1.0 / d as f64;
        let by_leverage = base * lev / targets.eps_exp;
        let by_floor = if floor_ok {
            0.0
        } else {
            base * (targets.lambda_floor - reg) / (lmin - reg).max(reg * 1e-3)
        };
        let wanted = (by_leverage.max(by_floor) * BATCH_OVERSHOOT).min(base * MAX_GROWTH);
        let batch = ((wanted - base).ceil().max(0.0) as u64)
            .max(targets.min_batch)
            .min(targets.budget - used);

        let split = linalg::sample_multinomial(batch, q, rng);
        for (i, &n) in split.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let policy = if i < policies.len() { &policies[i] } else { &uniform };
            let counts = env.step_transition_counts(policy, h, n, rng);
            data.add_counts(&counts, &features);
        }
    }
}

/// `(1 - perturb) g` over the policies followed by `perturb` on the uniform policy.
fn design_mixture(
    phis: &[DVector<f64>],
    targets: &CollectionTargets,
    h: usize,
) -> Result<Vec<f64>, EstimationError> {
    let g = match g_optimal_design(phis, DesignOptions::with_tol(targets.design_tol)) {
        Ok(g) => g.weights,
        Err(DesignError::AllZero) => vec![1.0 / phis.len() as f64; phis.len()],
        Err(source) => return Err(EstimationError::Design { step: h, source }),
    };
    let mut q: Vec<f64> = g.iter().map(|w| (1.0 - targets.perturb) * w).collect();
    q.push(targets.perturb);
    Ok(q)
}

/// Per-step collection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub episodes: u64,
    pub lambda_min: f64,
    pub max_leverage: f64,
    pub eps_exp: f64,
    pub lambda_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Estimated,
    Exact,
}

/// `phi_hat[pi][h]` for every policy of a cover, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    #[serde(with = "linalg::serde_nested_vectors")]
    pub phi_hat: Vec<Vec<DVector<f64>>>,
    pub eps: f64,
    pub delta: f64,
    pub source: FeatureSource,
    pub seed: Option<u64>,
    pub steps: Vec<StepStats>,
}

impl FeatureTable {
    /// Ground-truth visitations, for exact-feature runs and tests.
    pub fn exact(mdp: &LinearMdp, policies: &[Policy]) -> Self {
        Self {
            phi_hat: policies.iter().map(|p| exact_visitation(mdp, p).phi_pi).collect(),
            eps: 0.0,
            delta: 0.0,
            source: FeatureSource::Exact,
            seed: None,
            steps: Vec::new(),
        }
    }

    pub fn num_policies(&self) -> usize {
        self.phi_hat.len()
    }

    pub fn horizon(&self) -> usize {
        self.phi_hat.first().map_or(0, |p| p.len())
    }

    pub fn dim(&self) -> usize {
        self.phi_hat.first().and_then(|p| p.first()).map_or(0, |v| v.len())
    }

    /// Estimates of every policy at step `h`.
    pub fn step(&self, h: usize) -> Vec<DVector<f64>> {
        self.phi_hat.iter().map(|p| p[h].clone()).collect()
    }

    pub fn total_episodes(&self) -> u64 {
        self.steps.iter().map(|s| s.episodes).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature table serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimationError> {
        serde_json::from_str(text).map_err(|e| EstimationError::Serde(e.to_string()))
    }
}

/// Feature visitation of `policy` at the first step, from the known initial law.
pub fn initial_visitation(
    features: &[DVector<f64>],
    initial: &InitialState,
    policy: &Policy,
) -> DVector<f64> {
    let rho = initial.distribution(policy.num_states());
    let phis = state_features(policy, 0, features);
    let mut out = DVector::zeros(features[0].len());
    for (r, v) in rho.iter().zip(&phis) {
        if *r != 0.0 {
            out.axpy(*r, v, 1.0);
        }
    }
    out
}

/// Estimates `phi_{pi,h}` for every policy. Each step uses its own freshly
/// collected episodes.
pub fn estimate_feature_visitations(
    env: &mut dyn Environment,
    policies: &[Policy],
    cfg: &EstimationConfig,
    seed: Option<u64>,
    rng: &mut dyn RngCore,
) -> Result<FeatureTable, EstimationError> {
    cfg.check()?;
    if policies.is_empty() {
        return Err(EstimationError::Shape("policy set is empty".into()));
    }
    let (ns, na, horizon, d) = env.mdp_shape();
    if policies
        .iter()
        .any(|p| p.num_states() != ns || p.num_actions() != na || p.horizon() != horizon)
    {
        return Err(EstimationError::Shape("policy does not match the environment".into()));
    }
    let targets = CollectionTargets::from_config(cfg, d, horizon, policies.len());
    let features = env.features().to_vec();
    let initial = env.initial().clone();
    let mut phi_hat: Vec<Vec<DVector<f64>>> = policies
        .iter()
        .map(|p| vec![initial_visitation(&features, &initial, p)])
        .collect();
    let mut steps = Vec::new();
    for h in 0..horizon.saturating_sub(1) {
        let current: Vec<DVector<f64>> = phi_hat.iter().map(|p| p[h].clone()).collect();
        let data = collect_exploration_data(env, h, &current, policies, &targets, rng)?;
        let chol = data.cholesky()?;
        steps.push(StepStats {
            step: h,
            episodes: data.episodes(),
            lambda_min: data.lambda_min(),
            max_leverage: data.max_leverage(&current)?,
            eps_exp: targets.eps_exp,
            lambda_floor: targets.lambda_floor,
        });
        log::debug!("step {h}: {} episodes, lambda_min {:.3e}", data.episodes(), data.lambda_min());
        for (i, policy) in policies.iter().enumerate() {
            let next = propagate(&data, &chol, policy, &features, &current[i]);
            phi_hat[i].push(next);
        }
    }
    Ok(FeatureTable { phi_hat, eps: cfg.eps, delta: cfg.delta, source: FeatureSource::Estimated, seed, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    /// `errors[pi][h] = ||phi_hat - phi||`.
    pub errors: Vec<Vec<f64>>,
    pub threshold: f64,
    pub failures: Vec<(usize, usize)>,
}

impl AccuracyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Compares a table with the true visitations at threshold `eps / sqrt(d)`.
pub fn certify_accuracy(table: &FeatureTable, mdp: &LinearMdp, policies: &[Policy], eps: f64) -> AccuracyReport {
    let threshold = eps / (mdp.dim() as f64).sqrt();
    let mut errors = Vec::with_capacity(policies.len());
    let mut failures = Vec::new();
    for (i, policy) in policies.iter().enumerate() {
        let truth = exact_visitation(mdp, policy).phi_pi;
        let row: Vec<f64> = truth
            .iter()
            .zip(&table.phi_hat[i])
            .map(|(t, e)| (t - e).norm())
            .collect();
        for (h, &e) in row.iter().enumerate() {
            if e > threshold {
                failures.push((i, h));
            }
        }
        errors.push(row);
    }
    AccuracyReport { errors, threshold, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_random_mdp, Simulator};

    fn unit(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn single_transition_operator_by_hand() {
        // S=2, A=1, tabular: phi(s,0) = e_s.
        let features = vec![unit(2, 0), unit(2, 1)];
        let mut data = ExplorationData::new(0, 2, 1, 2);
        data.add_transition(0, 0, 1, &features);
        let policy = Policy::uniform(2, 1, 2);
        let t = estimate_transition_operator(&data, &policy, &features).unwrap();
        // cross = e_1 e_0', Lambda = diag(1.5, 0.5).
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0 / 1.5, 0.0]);
        assert!((t - expected).norm() < 1e-14);
    }

    #[test]
    fn regulariser_sets_baseline_covariance() {
        let data = ExplorationData::new(0, 3, 2, 4);
        assert!((data.lambda_min() - 0.25).abs() < 1e-15);
        assert_eq!(data.episodes(), 0);
    }

    #[test]
    fn loose_targets_stop_after_warmup() {
        let mdp = make_random_mdp(4, 2, 3, 8, 1).unwrap();
        let mut env = Simulator::new(&mdp);
        let policies = vec![Policy::uniform(4, 2, 3)];
        let phis = vec![exact_visitation(&mdp, &policies[0]).phi_pi[0].clone()];
        let targets = CollectionTargets {
            eps_exp: 64.0,
            lambda_floor: 1.0 / 8.0,
            budget: 1000,
            warmup: 50,
            perturb: 0.1,
            min_batch: 25,
            design_tol: 0.01,
        };
        let mut rng = linalg::stream_rng(0, 0);
        let data = collect_exploration_data(&mut env, 0, &phis, &policies, &targets, &mut rng).unwrap();
        assert_eq!(data.episodes(), 50);
    }

    #[test]
    fn unreachable_direction_exhausts_budget() {
        // Two states, state 1 never visited: its feature direction stays at 1/d.
        let mdp = LinearMdp::tabular(
            2,
            1,
            &vec![vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]]; 2],
            InitialState::Fixed(0),
        )
        .unwrap();
        let mut env = Simulator::new(&mdp);
        let policies = vec![Policy::uniform(2, 1, 2)];
        let phis = vec![unit(2, 0)];
        let targets = CollectionTargets {
            eps_exp: 1.0,
            lambda_floor: 1.0,
            budget: 500,
            warmup: 50,
            perturb: 0.1,
            min_batch: 25,
            design_tol: 0.01,
        };
        let mut rng = linalg::stream_rng(0, 0);
        let err = collect_exploration_data(&mut env, 0, &phis, &policies, &targets, &mut rng).unwrap_err();
        match err {
            EstimationError::BudgetExhausted { episodes, lambda_min, .. } => {
                assert_eq!(episodes, 500);
                assert!((lambda_min - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn horizon_one_consumes_nothing() {
        let mdp = make_random_mdp(3, 2, 1, 3, 4).unwrap();
        let mut env = Simulator::new(&mdp);
        let policies = vec![Policy::uniform(3, 2, 1), Policy::deterministic(3, 2, &[vec![1, 0, 1]])];
        let mut rng = linalg::stream_rng(0, 0);
        let table =
            estimate_feature_visitations(&mut env, &policies, &EstimationConfig::default(), None, &mut rng).unwrap();
        assert_eq!(env.episodes_run(), 0);
        assert_eq!(table.total_episodes(), 0);
        let exact = FeatureTable::exact(&mdp, &policies);
        for (a, b) in table.phi_hat.iter().flatten().zip(exact.phi_hat.iter().flatten()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn certification_flags_one_perturbed_entry() {
        let mdp = make_random_mdp(3, 2, 2, 6, 9).unwrap();
        let policies = vec![Policy::uniform(3, 2, 2), Policy::deterministic(3, 2, &[vec![0; 3], vec![1; 3]])];
        let mut table = FeatureTable::exact(&mdp, &policies);
        let clean = certify_accuracy(&table, &mdp, &policies, 0.1);
        assert!(clean.passed());
        assert_eq!(clean.max_error(), 0.0);
        let bump = 2.0 * 0.1 / 6f64.sqrt();
        table.phi_hat[1][1][0] += bump;
        let report = certify_accuracy(&table, &mdp, &policies, 0.1);
        assert_eq!(report.failures, vec![(1, 1)]);
    }

    #[test]
    fn eps_above_half_is_rejected() {
        let mdp = make_random_mdp(2, 2, 2, 4, 0).unwrap();
        let mut env = Simulator::new(&mdp);
        let cfg = EstimationConfig { eps: 0.6, ..Default::default() };
        let mut rng = linalg::stream_rng(0, 0);
        let res = estimate_feature_visitations(&mut env, &[Policy::uniform(2, 2, 2)], &cfg, None, &mut rng);
        assert!(matches!(res, Err(EstimationError::Config(_))));
    }
}
