//! The linear MDP model and its exact oracles.
//!
//! A [`LinearMdp`] stores the feature map `phi(s, a)` in `R^d` and, per step,
//! a `d x S` measure matrix whose column `s'` is `mu_h(s')`, so that
//! `P_h(s' | s, a) = <phi(s, a), mu_h(s')>`. Losses are linear in the same
//! features through per-episode vectors `theta_{k,h}` ([`LossSequence`]).
//!
//! Everything here is finite and small, so visitation vectors, occupancy
//! measures, values and covariances are computed exactly by forward dynamic
//! programming. Those oracles are the ground truth the learning modules are
//! tested against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, sample_categorical, sample_multinomial, stream_rng};

/// Absolute tolerance for stochasticity and norm checks.
pub const STOCHASTIC_TOL: f64 = 1e-9;

const RANDOM_MDP_RETRIES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("feature dimension {d} exceeds the number of state-action pairs {pairs}")]
    DimensionTooLarge { d: usize, pairs: usize },
    #[error("random instance generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("loss sequence violates a bound: {0}")]
    LossBound(String),
    #[error("policy shape does not match the MDP: {0}")]
    PolicyShape(String),
    #[error("episode {k} out of range for a sequence of {len} episodes")]
    EpisodeOutOfRange { k: usize, len: usize },
    #[error("serialization: {0}")]
    Serde(String),
}

/// Where episodes start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(usize),
    Distribution(Vec<f64>),
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Fixed(0)
    }
}

impl InitialState {
    pub fn distribution(&self, num_states: usize) -> Vec<f64> {
        match self {
            InitialState::Fixed(s) => {
                let mut rho = vec![0.0; num_states];
                if *s < num_states {
                    rho[*s] = 1.0;
                }
                rho
            }
            InitialState::Distribution(p) => p.clone(),
        }
    }

    pub fn uniform(num_states: usize) -> Self {
        InitialState::Distribution(vec![1.0 / num_states as f64; num_states])
    }
}

/// Episodic linear MDP with finite states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct LinearMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    features: Vec<DVector<f64>>,
    measures: Vec<DMatrix<f64>>,
    initial: InitialState,
    /// `P_h(s'|s,a)` at `[h][(s * A + a) * S + s']`.
    transitions: Vec<Vec<f64>>,
}

impl LinearMdp {
    /// Builds an MDP from its parts. Only shapes are checked here; use
    /// [`LinearMdp::validate`] for the probabilistic invariants.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        dim: usize,
        features: Vec<DVector<f64>>,
        measures: Vec<DMatrix<f64>>,
        initial: InitialState,
    ) -> Result<Self, MdpError> {
        if num_states == 0 || num_actions == 0 || horizon == 0 || dim == 0 {
            return Err(MdpError::Dimensions("S, A, H and d must all be positive".into()));
        }
        if features.len() != num_states * num_actions {
            return Err(MdpError::Dimensions(format!(
                "expected {} feature vectors, got {}",
                num_states * num_actions,
                features.len()
            )));
        }
        if let Some(bad) = features.iter().position(|f| f.len() != dim) {
            return Err(MdpError::Dimensions(format!("feature {bad} is not {dim}-dimensional")));
        }
        if measures.len() != horizon {
            return Err(MdpError::Dimensions(format!(
                "expected {horizon} measure matrices, got {}",
                measures.len()
            )));
        }
        if let Some(bad) = measures
            .iter()
            .position(|m| m.nrows() != dim || m.ncols() != num_states)
        {
            return Err(MdpError::Dimensions(format!("measure {bad} is not {dim}x{num_states}")));
        }
        match &initial {
            InitialState::Fixed(s) if *s >= num_states => {
                return Err(MdpError::Dimensions(format!("initial state {s} out of range")));
            }
            InitialState::Distribution(p) if p.len() != num_states => {
                return Err(MdpError::Dimensions("initial distribution has wrong length".into()));
            }
            _ => {}
        }
        let transitions = measures
            .iter()
            .map(|mu| {
                let mut table = Vec::with_capacity(num_states * num_actions * num_states);
                for phi in &features {
                    let row = mu.tr_mul(phi);
                    table.extend(row.iter().copied());
                }
                table
            })
            .collect();
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            dim,
            features,
            measures,
            initial,
            transitions,
        })
    }

    /// Tabular MDP embedded with one-hot features `phi(s,a) = e_{s*A+a}`.
    /// `transitions[h][s][a][s']` are the step-`h` transition probabilities.
    pub fn tabular(
        num_states: usize,
        num_actions: usize,
        transitions: &[Vec<Vec<Vec<f64>>>],
        initial: InitialState,
    ) -> Result<Self, MdpError> {
        let dim = num_states * num_actions;
        let horizon = transitions.len();
        let features = (0..dim)
            .map(|i| {
                let mut v = DVector::zeros(dim);
                v[i] = 1.0;
                v
            })
            .collect();
        let mut measures = Vec::with_capacity(horizon);
        for (h, step) in transitions.iter().enumerate() {
            if step.len() != num_states {
                return Err(MdpError::Dimensions(format!("step {h} has wrong state count")));
            }
            let mut mu = DMatrix::zeros(dim, num_states);
            for (s, per_action) in step.iter().enumerate() {
                if per_action.len() != num_actions {
                    return Err(MdpError::Dimensions(format!("step {h} state {s} action count")));
                }
                for (a, next) in per_action.iter().enumerate() {
                    if next.len() != num_states {
                        return Err(MdpError::Dimensions(format!("step {h} row length")));
                    }
                    for (sp, &p) in next.iter().enumerate() {
                        mu[(s * num_actions + a, sp)] = p;
                    }
                }
            }
            measures.push(mu);
        }
        Self::new(num_states, num_actions, horizon, dim, features, measures, initial)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn initial(&self) -> &InitialState {
        &self.initial
    }
    pub fn features(&self) -> &[DVector<f64>] {
        &self.features
    }
    pub fn measures(&self) -> &[DMatrix<f64>] {
        &self.measures
    }

    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn feature(&self, s: usize, a: usize) -> &DVector<f64> {
        &self.features[self.pair_index(s, a)]
    }

    /// Row `P_h(. | s, a)`.
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.pair_index(s, a) * self.num_states;
        &self.transitions[h][start..start + self.num_states]
    }

    pub fn initial_distribution(&self) -> Vec<f64> {
        self.initial.distribution(self.num_states)
    }

    pub fn with_initial(&self, initial: InitialState) -> Result<Self, MdpError> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.dim,
            self.features.clone(),
            self.measures.clone(),
            initial,
        )
    }

    /// Every violated invariant; an empty report means the instance is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let norm = self.feature(s, a).norm();
                if norm > 1.0 + STOCHASTIC_TOL {
                    violations.push(Violation::FeatureNorm { state: s, action: a, norm });
                }
            }
        }
        let mass_bound = (self.dim as f64).sqrt();
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let row = self.transition_row(h, s, a);
                    for (next, &p) in row.iter().enumerate() {
                        if p < -STOCHASTIC_TOL {
                            violations.push(Violation::NegativeProbability {
                                step: h,
                                state: s,
                                action: a,
                                next,
                                value: p,
                            });
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > STOCHASTIC_TOL {
                        violations.push(Violation::RowSum { step: h, state: s, action: a, sum });
                    }
                }
            }
            let total: DVector<f64> = self.measures[h].column_sum();
            let norm = total.norm();
            if norm > mass_bound + STOCHASTIC_TOL {
                violations.push(Violation::MeasureMass { step: h, norm });
            }
        }
        if let InitialState::Distribution(p) = &self.initial {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&x| x < -STOCHASTIC_TOL) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                violations.push(Violation::InitialDistribution { sum });
            }
        }
        ValidationReport { violations }
    }

    /// States with positive probability of being occupied at each step under
    /// some policy.
    pub fn reachable_states(&self) -> Vec<Vec<bool>> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut current: Vec<bool> = self
            .initial_distribution()
            .iter()
            .map(|&p| p > 0.0)
            .collect();
        for h in 0..self.horizon {
            let mut next = vec![false; self.num_states];
            for s in (0..self.num_states).filter(|&s| current[s]) {
                for a in 0..self.num_actions {
                    for (sp, &p) in self.transition_row(h, s, a).iter().enumerate() {
                        if p > STOCHASTIC_TOL {
                            next[sp] = true;
                        }
                    }
                }
            }
            out.push(current);
            current = next;
        }
        out
    }

    /// Serialises to the JSON instance format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mdp serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        serde_json::from_str(text).map_err(|e| MdpError::Serde(e.to_string()))
    }
}

/// On-disk form of a [`LinearMdp`]: features row-major, one `d x S` measure
/// per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    feature_dim: usize,
    /// Row `s * A + a` holds `phi(s, a)`.
    features: Vec<Vec<f64>>,
    /// `measures[h][i][s']` is coordinate `i` of `mu_h(s')`.
    measures: Vec<Vec<Vec<f64>>>,
    initial: InitialState,
}

impl From<LinearMdp> for MdpFile {
    fn from(m: LinearMdp) -> Self {
        MdpFile {
            num_states: m.num_states,
            num_actions: m.num_actions,
            horizon: m.horizon,
            feature_dim: m.dim,
            features: m.features.iter().map(|f| f.iter().copied().collect()).collect(),
            measures: m
                .measures
                .iter()
                .map(|mu| {
                    (0..mu.nrows())
                        .map(|i| mu.row(i).iter().copied().collect())
                        .collect()
                })
                .collect(),
            initial: m.initial,
        }
    }
}

impl TryFrom<MdpFile> for LinearMdp {
    type Error = MdpError;

    fn try_from(f: MdpFile) -> Result<Self, Self::Error> {
        let features = f.features.into_iter().map(DVector::from_vec).collect();
        let mut measures = Vec::with_capacity(f.measures.len());
        for rows in f.measures {
            if rows.len() != f.feature_dim || rows.iter().any(|r| r.len() != f.num_states) {
                return Err(MdpError::Dimensions("measure matrix has wrong shape".into()));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            measures.push(DMatrix::from_row_slice(f.feature_dim, f.num_states, &flat));
        }
        LinearMdp::new(
            f.num_states,
            f.num_actions,
            f.horizon,
            f.feature_dim,
            features,
            measures,
            f.initial,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FeatureNorm { state: usize, action: usize, norm: f64 },
    NegativeProbability { step: usize, state: usize, action: usize, next: usize, value: f64 },
    RowSum { step: usize, state: usize, action: usize, sum: f64 },
    MeasureMass { step: usize, norm: f64 },
    InitialDistribution { sum: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Free-function form of [`LinearMdp::validate`].
pub fn validate_mdp(mdp: &LinearMdp) -> ValidationReport {
    mdp.validate()
}

fn dirichlet_row<R: Rng + ?Sized>(len: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Random valid linear MDP.
///
/// With `d == S * A` the instance is the one-hot tabular embedding of random
/// dense transition kernels. Otherwise features are points of the probability
/// simplex in `R^d` and each coordinate of `mu_h` is a distribution over next
/// states, so every transition row is a mixture of distributions and the MDP
/// is exactly linear. Draws are retried until the features span `R^d`.
pub fn make_random_mdp(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    seed: u64,
) -> Result<LinearMdp, MdpError> {
    if num_states == 0 || num_actions == 0 || horizon == 0 || dim == 0 {
        return Err(MdpError::Dimensions("S, A, H and d must all be positive".into()));
    }
    let pairs = num_states * num_actions;
    if dim > pairs {
        return Err(MdpError::DimensionTooLarge { d: dim, pairs });
    }
    let mut rng = stream_rng(seed, 0x6d6470);
    for _ in 0..RANDOM_MDP_RETRIES {
        let candidate = if dim == pairs {
            let kernels: Vec<Vec<Vec<Vec<f64>>>> = (0..horizon)
                .map(|_| {
                    (0..num_states)
                        .map(|_| {
                            (0..num_actions)
                                .map(|_| dirichlet_row(num_states, 1.0, &mut rng))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            LinearMdp::tabular(num_states, num_actions, &kernels, InitialState::Fixed(0))?
        } else {
            let features: Vec<DVector<f64>> = (0..pairs)
                .map(|_| DVector::from_vec(dirichlet_row(dim, 0.5, &mut rng)))
                .collect();
            let gram = linalg::weighted_second_moment(dim, features.iter().map(|f| (1.0, f)));
            if linalg::numerical_rank(&gram, 1e-8) < dim {
                continue;
            }
            let measures = (0..horizon)
                .map(|_| {
                    let mut mu = DMatrix::zeros(dim, num_states);
                    for i in 0..dim {
                        for (sp, p) in dirichlet_row(num_states, 1.0, &mut rng).into_iter().enumerate() {
                            mu[(i, sp)] = p;
                        }
                    }
                    mu
                })
                .collect();
            LinearMdp::new(
                num_states,
                num_actions,
                horizon,
                dim,
                features,
                measures,
                InitialState::Fixed(0),
            )?
        };
        if candidate.validate().is_valid() {
            return Ok(candidate);
        }
    }
    Err(MdpError::GenerationFailed(RANDOM_MDP_RETRIES))
}

/// Adversary's loss vectors `theta_{k,h}` for every episode and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSequence {
    dim: usize,
    horizon: usize,
    /// `thetas[k][h]`.
    #[serde(with = "linalg::serde_nested_vectors")]
    thetas: Vec<Vec<DVector<f64>>>,
    /// Factor applied to the raw vectors at construction (1 when none).
    scale: f64,
}

impl LossSequence {
    /// Accepts the vectors as given, rejecting any that break
    /// `||theta|| <= sqrt(d)` or produce a loss outside `[-1, 1]` on a
    /// reachable pair.
    pub fn new(mdp: &LinearMdp, thetas: Vec<Vec<DVector<f64>>>) -> Result<Self, MdpError> {
        Self::check_shape(mdp, &thetas)?;
        let (max_norm, max_loss) = Self::extremes(mdp, &thetas);
        let norm_bound = (mdp.dim() as f64).sqrt();
        if max_norm > norm_bound + STOCHASTIC_TOL {
            return Err(MdpError::LossBound(format!(
                "max ||theta|| = {max_norm} exceeds sqrt(d) = {norm_bound}"
            )));
        }
        if max_loss > 1.0 + STOCHASTIC_TOL {
            return Err(MdpError::LossBound(format!("max |loss| = {max_loss} exceeds 1")));
        }
        Ok(Self { dim: mdp.dim(), horizon: mdp.horizon(), thetas, scale: 1.0 })
    }

    /// Rescales all vectors by one common factor `c <= 1` so that both the
    /// norm bound and the `|loss| <= 1` bound hold; the factor is recorded.
    pub fn normalized(mdp: &LinearMdp, mut thetas: Vec<Vec<DVector<f64>>>) -> Result<Self, MdpError> {
        Self::check_shape(mdp, &thetas)?;
        let (max_norm, max_loss) = Self::extremes(mdp, &thetas);
        let norm_bound = (mdp.dim() as f64).sqrt();
        let mut scale: f64 = 1.0;
        if max_norm > norm_bound {
            scale = scale.min(norm_bound / max_norm);
        }
        if max_loss > 1.0 {
            scale = scale.min(1.0 / max_loss);
        }
        if scale < 1.0 {
            for per_step in thetas.iter_mut() {
                for theta in per_step.iter_mut() {
                    *theta *= scale;
                }
            }
        }
        Ok(Self { dim: mdp.dim(), horizon: mdp.horizon(), thetas, scale })
    }

    fn check_shape(mdp: &LinearMdp, thetas: &[Vec<DVector<f64>>]) -> Result<(), MdpError> {
        for (k, per_step) in thetas.iter().enumerate() {
            if per_step.len() != mdp.horizon() {
                return Err(MdpError::Dimensions(format!("episode {k} has wrong horizon")));
            }
            if per_step.iter().any(|t| t.len() != mdp.dim()) {
                return Err(MdpError::Dimensions(format!("episode {k} has wrong dimension")));
            }
        }
        Ok(())
    }

    fn extremes(mdp: &LinearMdp, thetas: &[Vec<DVector<f64>>]) -> (f64, f64) {
        let reachable = mdp.reachable_states();
        let mut max_norm: f64 = 0.0;
        let mut max_loss: f64 = 0.0;
        for per_step in thetas {
            for (h, theta) in per_step.iter().enumerate() {
                max_norm = max_norm.max(theta.norm());
                for s in (0..mdp.num_states()).filter(|&s| reachable[h][s]) {
                    for a in 0..mdp.num_actions() {
                        max_loss = max_loss.max(mdp.feature(s, a).dot(theta).abs());
                    }
                }
            }
        }
        (max_norm, max_loss)
    }

    pub fn num_episodes(&self) -> usize {
        self.thetas.len()
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn episode(&self, k: usize) -> &[DVector<f64>] {
        &self.thetas[k]
    }
    pub fn thetas(&self) -> &[Vec<DVector<f64>>] {
        &self.thetas
    }

    /// The first `k` episodes.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            dim: self.dim,
            horizon: self.horizon,
            thetas: self.thetas[..k.min(self.thetas.len())].to_vec(),
            scale: self.scale,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("losses serialise")
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        serde_json::from_str(text).map_err(|e| MdpError::Serde(e.to_string()))
    }
}

/// Tabular Markov policy: per step, a row-stochastic `S x A` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    /// `probs[h][s * A + a] = pi_h(a | s)`.
    probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn from_tables(
        num_states: usize,
        num_actions: usize,
        probs: Vec<Vec<f64>>,
    ) -> Result<Self, MdpError> {
        if probs.iter().any(|t| t.len() != num_states * num_actions) {
            return Err(MdpError::PolicyShape("table length must be S * A".into()));
        }
        let policy = Self { num_states, num_actions, probs };
        if let Some((h, s)) = policy.first_invalid_row() {
            return Err(MdpError::PolicyShape(format!("row (h={h}, s={s}) is not a distribution")));
        }
        Ok(policy)
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let row = 1.0 / num_actions as f64;
        Self {
            num_states,
            num_actions,
            probs: vec![vec![row; num_states * num_actions]; horizon],
        }
    }

    /// `actions[h][s]` is the action taken in state `s` at step `h`.
    pub fn deterministic(num_states: usize, num_actions: usize, actions: &[Vec<usize>]) -> Self {
        let probs = actions
            .iter()
            .map(|per_state| {
                let mut t = vec![0.0; num_states * num_actions];
                for (s, &a) in per_state.iter().enumerate() {
                    t[s * num_actions + a] = 1.0;
                }
                t
            })
            .collect();
        Self { num_states, num_actions, probs }
    }

    pub fn horizon(&self) -> usize {
        self.probs.len()
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        &self.probs[h][s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[h][s * self.num_actions + a]
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// First `(h, s)` whose row is not a distribution within 1e-12.
    pub fn first_invalid_row(&self) -> Option<(usize, usize)> {
        for h in 0..self.horizon() {
            for s in 0..self.num_states {
                let row = self.row(h, s);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-12 {
                    return Some((h, s));
                }
            }
        }
        None
    }

    pub fn check_shape(&self, mdp: &LinearMdp) -> Result<(), MdpError> {
        if self.num_states != mdp.num_states()
            || self.num_actions != mdp.num_actions()
            || self.horizon() != mdp.horizon()
        {
            return Err(MdpError::PolicyShape(format!(
                "policy is {}x{}x{}, mdp is {}x{}x{}",
                self.num_states,
                self.num_actions,
                self.horizon(),
                mdp.num_states(),
                mdp.num_actions(),
                mdp.horizon()
            )));
        }
        Ok(())
    }

    /// `phi_{pi,h}(s) = E_{a ~ pi_h(.|s)} phi(s, a)`.
    pub fn state_feature(&self, mdp: &LinearMdp, h: usize, s: usize) -> DVector<f64> {
        let mut out = DVector::zeros(mdp.dim());
        for (a, &p) in self.row(h, s).iter().enumerate() {
            if p != 0.0 {
                out.axpy(p, mdp.feature(s, a), 1.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Simulates one episode. `theta` holds the per-step loss vectors of the
/// episode; observed losses are exactly `<phi(s_h, a_h), theta_h>`.
pub fn simulate_episode<R: Rng + ?Sized>(
    mdp: &LinearMdp,
    policy: &Policy,
    theta: &[DVector<f64>],
    episode: usize,
    rng: &mut R,
) -> Trajectory {
    let rho = mdp.initial_distribution();
    let mut state = match mdp.initial() {
        InitialState::Fixed(s) => *s,
        InitialState::Distribution(_) => sample_categorical(&rho, rng),
    };
    let mut steps = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let action = sample_categorical(policy.row(h, state), rng);
        let loss = mdp.feature(state, action).dot(&theta[h]);
        steps.push(Step { state, action, loss });
        if h + 1 < mdp.horizon() {
            state = sample_categorical(mdp.transition_row(h, state, action), rng);
        }
    }
    Trajectory { episode, steps }
}

/// Per-step feature visitation vectors and occupancy measures of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationProfile {
    /// `phi_pi[h] = E_pi phi(s_h, a_h)`.
    pub phi_pi: Vec<DVector<f64>>,
    /// `occupancy[h][s * A + a]`.
    pub occupancy: Vec<Vec<f64>>,
}

/// State distribution at every step under `policy` (forward recursion).
pub fn state_distributions(mdp: &LinearMdp, policy: &Policy) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = Vec::with_capacity(mdp.horizon());
    let mut rho = mdp.initial_distribution();
    for h in 0..mdp.horizon() {
        let mut next = vec![0.0; ns];
        if h + 1 < mdp.horizon() {
            for s in 0..ns {
                if rho[s] == 0.0 {
                    continue;
                }
                for a in 0..na {
                    let w = rho[s] * policy.prob(h, s, a);
                    if w == 0.0 {
                        continue;
                    }
                    for (sp, &p) in mdp.transition_row(h, s, a).iter().enumerate() {
                        next[sp] += w * p;
                    }
                }
            }
        }
        out.push(std::mem::replace(&mut rho, next));
    }
    out
}

pub fn exact_visitation(mdp: &LinearMdp, policy: &Policy) -> VisitationProfile {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let rhos = state_distributions(mdp, policy);
    let mut phi_pi = Vec::with_capacity(mdp.horizon());
    let mut occupancy = Vec::with_capacity(mdp.horizon());
    for (h, rho) in rhos.iter().enumerate() {
        let mut occ = vec![0.0; ns * na];
        let mut phi = DVector::zeros(mdp.dim());
        for s in 0..ns {
            for a in 0..na {
                let w = rho[s] * policy.prob(h, s, a);
                occ[s * na + a] = w;
                if w != 0.0 {
                    phi.axpy(w, mdp.feature(s, a), 1.0);
                }
            }
        }
        phi_pi.push(phi);
        occupancy.push(occ);
    }
    VisitationProfile { phi_pi, occupancy }
}

/// `sum_h <phi_{pi,h}, theta_h>`.
pub fn value_from_visitation(phi_pi: &[DVector<f64>], theta: &[DVector<f64>]) -> f64 {
    phi_pi.iter().zip(theta).map(|(p, t)| p.dot(t)).sum()
}

/// `V_k^pi` for episode `k`.
pub fn exact_value(
    mdp: &LinearMdp,
    policy: &Policy,
    losses: &LossSequence,
    k: usize,
) -> Result<f64, MdpError> {
    if k >= losses.num_episodes() {
        return Err(MdpError::EpisodeOutOfRange { k, len: losses.num_episodes() });
    }
    let visit = exact_visitation(mdp, policy);
    Ok(value_from_visitation(&visit.phi_pi, losses.episode(k)))
}

/// `Lambda_{pi,h} = E_pi phi(s_h,a_h) phi(s_h,a_h)'`.
pub fn policy_covariance(mdp: &LinearMdp, policy: &Policy, h: usize) -> DMatrix<f64> {
    let visit = exact_visitation(mdp, policy);
    occupancy_covariance(mdp, &visit.occupancy[h])
}

pub fn occupancy_covariance(mdp: &LinearMdp, occupancy: &[f64]) -> DMatrix<f64> {
    linalg::weighted_second_moment(
        mdp.dim(),
        occupancy.iter().copied().zip(mdp.features().iter()),
    )
}

/// `min_h max_pi lambda_min(Lambda_{pi,h})` over the supplied policies.
pub fn exploratory_lambda(mdp: &LinearMdp, policies: &[Policy]) -> f64 {
    let visits: Vec<VisitationProfile> = policies.iter().map(|p| exact_visitation(mdp, p)).collect();
    (0..mdp.horizon())
        .map(|h| {
            visits
                .iter()
                .map(|v| {
                    let cov = occupancy_covariance(mdp, &v.occupancy[h]);
                    SymmetricEigen::new(cov)
                        .eigenvalues
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min)
                        .max(0.0)
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Interaction handle used by the learners. The learner sees the feature
/// map and the initial state; transitions are only observed through
/// episodes.
pub trait Environment {
    fn mdp_shape(&self) -> (usize, usize, usize, usize);
    fn features(&self) -> &[DVector<f64>];
    fn initial(&self) -> &InitialState;

    /// One episode under `policy` with per-step loss vectors `theta`.
    fn run_episode(&mut self, policy: &Policy, theta: &[DVector<f64>], rng: &mut dyn RngCore)
        -> Trajectory;

    /// Runs `n` independent episodes of `policy` and returns the counts of
    /// the step-`h` transition `(s_h, a_h, s_{h+1})`, laid out at
    /// `(s * A + a) * S + s'`. The default plays the episodes one by one.
    fn step_transition_counts(
        &mut self,
        policy: &Policy,
        h: usize,
        n: u64,
        rng: &mut dyn RngCore,
    ) -> Vec<u64> {
        let (ns, na, horizon, d) = self.mdp_shape();
        assert!(h + 1 < horizon, "step {h} has no successor state");
        let zeros = vec![DVector::zeros(d); horizon];
        let mut counts = vec![0u64; ns * na * ns];
        for _ in 0..n {
            let traj = self.run_episode(policy, &zeros, rng);
            let cur = traj.steps[h];
            let next = traj.steps[h + 1].state;
            counts[(cur.state * na + cur.action) * ns + next] += 1;
        }
        counts
    }

    /// Total episodes played through this handle.
    fn episodes_run(&self) -> u64;
}

/// Plays every episode explicitly.
#[derive(Debug)]
pub struct EpisodeRunner<'a> {
    mdp: &'a LinearMdp,
    episodes: u64,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(mdp: &'a LinearMdp) -> Self {
        Self { mdp, episodes: 0 }
    }
}

impl Environment for EpisodeRunner<'_> {
    fn mdp_shape(&self) -> (usize, usize, usize, usize) {
        (self.mdp.num_states(), self.mdp.num_actions(), self.mdp.horizon(), self.mdp.dim())
    }
    fn features(&self) -> &[DVector<f64>] {
        self.mdp.features()
    }
    fn initial(&self) -> &InitialState {
        self.mdp.initial()
    }
    fn run_episode(
        &mut self,
        policy: &Policy,
        theta: &[DVector<f64>],
        rng: &mut dyn RngCore,
    ) -> Trajectory {
        let traj = simulate_episode(self.mdp, policy, theta, self.episodes as usize, rng);
        self.episodes += 1;
        traj
    }
    fn episodes_run(&self) -> u64 {
        self.episodes
    }
}

/// Trajectory simulator backed by the true model. Batches of episodes are
/// drawn in one shot: the step-`h` transition counts of `n` i.i.d. episodes
/// are multinomial with cell probabilities `occupancy_h(s,a) P_h(s'|s,a)`,
/// which is exactly the law of playing them one at a time.
#[derive(Debug)]
pub struct Simulator<'a> {
    mdp: &'a LinearMdp,
    episodes: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(mdp: &'a LinearMdp) -> Self {
        Self { mdp, episodes: 0 }
    }
}

impl Environment for Simulator<'_> {
    fn mdp_shape(&self) -> (usize, usize, usize, usize) {
        (self.mdp.num_states(), self.mdp.num_actions(), self.mdp.horizon(), self.mdp.dim())
    }
    fn features(&self) -> &[DVector<f64>] {
        self.mdp.features()
    }
    fn initial(&self) -> &InitialState {
        self.mdp.initial()
    }
    fn run_episode(
        &mut self,
        policy: &Policy,
        theta: &[DVector<f64>],
        rng: &mut dyn RngCore,
    ) -> Trajectory {
        let traj = simulate_episode(self.mdp, policy, theta, self.episodes as usize, rng);
        self.episodes += 1;
        traj
    }
    fn step_transition_counts(
        &mut self,
        policy: &Policy,
        h: usize,
        n: u64,
        rng: &mut dyn RngCore,
    ) -> Vec<u64> {
        let mdp = self.mdp;
        assert!(h + 1 < mdp.horizon(), "step {h} has no successor state");
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let occ = &exact_visitation(mdp, policy).occupancy[h];
        let mut cells = vec![0.0; ns * na * ns];
        for pair in 0..ns * na {
            if occ[pair] == 0.0 {
                continue;
            }
            let (s, a) = (pair / na, pair % na);
            for (sp, &p) in mdp.transition_row(h, s, a).iter().enumerate() {
                cells[pair * ns + sp] = occ[pair] * p.max(0.0);
            }
        }
        self.episodes += n;
        sample_multinomial(n, &cells, rng)
    }
    fn episodes_run(&self) -> u64 {
        self.episodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state_tabular() -> LinearMdp {
        let step = vec![
            vec![vec![0.7, 0.3], vec![0.1, 0.9]],
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
        ];
        LinearMdp::tabular(2, 2, &[step.clone(), step], InitialState::Fixed(0)).unwrap()
    }

    #[test]
    fn tabular_embedding_is_valid() {
        assert!(validate_mdp(&two_state_tabular()).is_valid());
    }

    #[test]
    fn negated_measure_entry_is_flagged() {
        let mdp = two_state_tabular();
        let mut measures = mdp.measures().to_vec();
        // (s=0, a=1) -> s'=1 at step 1: 0.9 becomes -0.3, row sum breaks too.
        measures[1][(1, 1)] = -0.3;
        let bad = LinearMdp::new(2, 2, 2, 4, mdp.features().to_vec(), measures, InitialState::Fixed(0))
            .unwrap();
        let report = bad.validate();
        assert!(report.violations.contains(&Violation::NegativeProbability {
            step: 1,
            state: 0,
            action: 1,
            next: 1,
            value: -0.3
        }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::RowSum { step: 1, state: 0, action: 1, .. })));
    }

    #[test]
    fn random_mdp_respects_preconditions() {
        let tab = make_random_mdp(2, 2, 2, 4, 0).unwrap();
        assert!(tab.validate().is_valid());
        // Exactly the one-hot embedding when d = S * A.
        for (i, f) in tab.features().iter().enumerate() {
            assert_eq!(f[i], 1.0);
            assert_eq!(f.sum(), 1.0);
        }
        assert!(make_random_mdp(8, 4, 4, 6, 7).unwrap().validate().is_valid());
        assert_eq!(
            make_random_mdp(2, 2, 1, 10, 0),
            Err(MdpError::DimensionTooLarge { d: 10, pairs: 4 })
        );
    }

    #[test]
    fn single_step_single_state_trajectory() {
        let features = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let mu = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let mdp = LinearMdp::new(1, 2, 1, 2, features, vec![mu], InitialState::Fixed(0)).unwrap();
        let policy = Policy::deterministic(1, 2, &[vec![1]]);
        let theta = vec![DVector::from_vec(vec![0.2, 0.8])];
        let mut rng = stream_rng(0, 0);
        let traj = simulate_episode(&mdp, &policy, &theta, 0, &mut rng);
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.steps[0].loss, 0.8);

        let uniform = Policy::uniform(1, 2, 1);
        let losses = LossSequence::new(&mdp, vec![theta]).unwrap();
        assert_abs_diff_eq!(exact_value(&mdp, &uniform, &losses, 0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(exact_value(&mdp, &uniform, &losses, 1).is_err());
    }

    #[test]
    fn zero_losses_are_observed_as_zero() {
        let mdp = make_random_mdp(4, 2, 3, 5, 1).unwrap();
        let zeros = vec![DVector::zeros(5); 3];
        let mut rng = stream_rng(1, 0);
        let traj = simulate_episode(&mdp, &Policy::uniform(4, 2, 3), &zeros, 0, &mut rng);
        assert!(traj.steps.iter().all(|s| s.loss == 0.0));
    }

    #[test]
    fn single_step_visitation_matches_direct_average() {
        let mdp = make_random_mdp(3, 3, 1, 4, 5).unwrap();
        let probs = vec![vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5]];
        let policy = Policy::from_tables(3, 3, probs).unwrap();
        let visit = exact_visitation(&mdp, &policy);
        let direct = mdp.feature(0, 0) * 0.2 + mdp.feature(0, 1) * 0.3 + mdp.feature(0, 2) * 0.5;
        assert_abs_diff_eq!((visit.phi_pi[0].clone() - direct).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_chain_has_point_mass_occupancy() {
        // s -> s+1 for any action.
        let step = |_: usize| -> Vec<Vec<Vec<f64>>> {
            (0..3)
                .map(|s| {
                    let mut row = vec![0.0; 3];
                    row[(s + 1).min(2)] = 1.0;
                    vec![row.clone(), row]
                })
                .collect()
        };
        let mdp = LinearMdp::tabular(3, 2, &[step(0), step(1), step(2)], InitialState::Fixed(0)).unwrap();
        let policy = Policy::deterministic(3, 2, &[vec![1, 1, 1], vec![0, 0, 0], vec![1, 0, 1]]);
        let visit = exact_visitation(&mdp, &policy);
        for (h, occ) in visit.occupancy.iter().enumerate() {
            assert_eq!(occ.iter().filter(|&&x| x == 1.0).count(), 1, "step {h}");
            assert_abs_diff_eq!(occ.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
        assert_eq!(visit.occupancy[1][2], 1.0); // state 1, action 0
    }

    #[test]
    fn covariance_of_point_mass_and_uniform_tabular() {
        let mdp = two_state_tabular();
        // Point mass: fixed start, deterministic action at step 0.
        let policy = Policy::deterministic(2, 2, &[vec![1, 1], vec![0, 0]]);
        let cov = policy_covariance(&mdp, &policy, 0);
        let phi = mdp.feature(0, 1);
        assert_abs_diff_eq!((cov - phi * phi.transpose()).norm(), 0.0, epsilon = 1e-15);

        let uniform_start = mdp.with_initial(InitialState::uniform(2)).unwrap();
        let cov = policy_covariance(&uniform_start, &Policy::uniform(2, 2, 2), 0);
        assert_abs_diff_eq!((cov - DMatrix::identity(4, 4) * 0.25).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exploratory_lambda_cases() {
        let mdp = two_state_tabular().with_initial(InitialState::uniform(2)).unwrap();
        let lam = exploratory_lambda(&mdp, &[Policy::uniform(2, 2, 2)]);
        // Step 0 visits all four pairs with mass 1/4; step 1's state law is
        // not uniform so the minimum over steps can only be smaller.
        assert!(lam <= 0.25 + 1e-12 && lam > 0.0);

        let det = Policy::deterministic(2, 2, &[vec![0, 0], vec![0, 0]]);
        assert_abs_diff_eq!(exploratory_lambda(&mdp, &[det]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn uniform_everything_gives_one_over_pairs() {
        // Transitions uniform, initial uniform, policy uniform: every pair has mass 1/(SA).
        let step: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.5, 0.5]; 2]; 2];
        let mdp = LinearMdp::tabular(2, 2, &[step.clone(), step], InitialState::uniform(2)).unwrap();
        let lam = exploratory_lambda(&mdp, &[Policy::uniform(2, 2, 2)]);
        assert_abs_diff_eq!(lam, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn losses_are_validated_and_normalised() {
        let mdp = two_state_tabular();
        let big = vec![vec![DVector::from_element(4, 1.5); 2]];
        assert!(matches!(LossSequence::new(&mdp, big.clone()), Err(MdpError::LossBound(_))));
        let seq = LossSequence::normalized(&mdp, big).unwrap();
        assert_abs_diff_eq!(seq.scale(), 1.0 / 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(seq.episode(0)[0][0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mdp = make_random_mdp(4, 3, 3, 5, 11).unwrap();
        let back = LinearMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(back, mdp);
    }
}
