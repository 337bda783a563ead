//! Finite policy classes over linear softmax policies.
//!
//! A softmax policy is parameterised by one vector `w_h` in the unit ball of
//! `R^d` per step and acts as `pi_h(a|s) ~ exp(eta <phi(s,a), w_h>)`. A cover
//! is a finite set of such parameters; the learner competes with the best
//! member. Because values are linear in the losses, the best member in
//! hindsight is also the best member under the averaged loss.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::mdp::{exact_visitation, LinearMdp, LossSequence, MdpError, Policy};

/// Upper limit on the number of per-step lattice candidates examined.
const MAX_LATTICE_CANDIDATES: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum CoverError {
    #[error("budget must be at least 1")]
    EmptyBudget,
    #[error("eps_prime must be in (0, 1], got {0}")]
    Resolution(f64),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("the per-step lattice has too many candidates ({0}); raise eps_prime")]
    GridTooLarge(u64),
    #[error("cover has dim {cover} x {cover_h}, mdp has {mdp} x {mdp_h}")]
    Dimensions { cover: usize, cover_h: usize, mdp: usize, mdp_h: usize },
    #[error("policy set is empty")]
    EmptySet,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("cover json: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    /// One parameter vector per step.
    #[serde(with = "linalg::serde_vectors")]
    pub params: Vec<DVector<f64>>,
    pub temperature: f64,
}

impl SoftmaxPolicy {
    pub fn zero(dim: usize, horizon: usize, temperature: f64) -> Self {
        Self { params: vec![DVector::zeros(dim); horizon], temperature }
    }

    pub fn horizon(&self) -> usize {
        self.params.len()
    }

    /// Action distribution at step `h` in state `s`.
    pub fn action_probs(&self, mdp: &LinearMdp, h: usize, s: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..mdp.num_actions())
            .map(|a| self.temperature * mdp.feature(s, a).dot(&self.params[h]))
            .collect();
        softmax(&logits)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_to_tabular(mdp: &LinearMdp, policy: &SoftmaxPolicy) -> Result<Policy, CoverError> {
    if policy.horizon() != mdp.horizon() || policy.params.iter().any(|w| w.len() != mdp.dim()) {
        return Err(CoverError::Dimensions {
            cover: policy.params.first().map_or(0, |w| w.len()),
            cover_h: policy.horizon(),
            mdp: mdp.dim(),
            mdp_h: mdp.horizon(),
        });
    }
    let tables = (0..mdp.horizon())
        .map(|h| {
            (0..mdp.num_states())
                .flat_map(|s| policy.action_probs(mdp, h, s))
                .collect()
        })
        .collect();
    Ok(Policy::from_tables(mdp.num_states(), mdp.num_actions(), tables)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverMode {
    Grid,
    Random,
    /// Hand-supplied policies.
    Explicit,
}

impl std::str::FromStr for CoverMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid" => Ok(Self::Grid),
            "random" => Ok(Self::Random),
            "explicit" => Ok(Self::Explicit),
            other => Err(format!("unknown cover mode `{other}`")),
        }
    }
}

/// Construction metadata, serialised with every cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSpec {
    pub dim: usize,
    pub horizon: usize,
    pub eps_prime: f64,
    pub budget: usize,
    pub mode: CoverMode,
    pub seed: u64,
    pub temperature: f64,
}

impl CoverSpec {
    /// Temperature `2 sqrt(d K) H` for a run of `k` episodes.
    pub fn default_temperature(dim: usize, horizon: usize, k: usize) -> f64 {
        2.0 * ((dim * k.max(1)) as f64).sqrt() * horizon as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoverPolicy {
    Softmax(SoftmaxPolicy),
    Tabular(Policy),
}

impl CoverPolicy {
    pub fn to_tabular(&self, mdp: &LinearMdp) -> Result<Policy, CoverError> {
        match self {
            Self::Softmax(p) => softmax_to_tabular(mdp, p),
            Self::Tabular(p) => {
                p.check_shape(mdp)?;
                Ok(p.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCover {
    pub policies: Vec<CoverPolicy>,
    pub spec: CoverSpec,
    /// Guaranteed covering radius in the summed per-step norm. `None` when
    /// the net was truncated or drawn at random.
    pub covering_radius: Option<f64>,
}

impl PolicyCover {
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Wraps an explicit list of tabular policies.
    pub fn from_tabular(policies: Vec<Policy>, dim: usize) -> Result<Self, CoverError> {
        let horizon = policies.first().ok_or(CoverError::EmptySet)?.horizon();
        let budget = policies.len();
        Ok(Self {
            policies: policies.into_iter().map(CoverPolicy::Tabular).collect(),
            spec: CoverSpec {
                dim,
                horizon,
                eps_prime: 1.0,
                budget,
                mode: CoverMode::Explicit,
                seed: 0,
                temperature: 1.0,
            },
            covering_radius: None,
        })
    }

    pub fn materialize(&self, mdp: &LinearMdp) -> Result<Vec<Policy>, CoverError> {
        if self.spec.dim != mdp.dim() || self.spec.horizon != mdp.horizon() {
            return Err(CoverError::Dimensions {
                cover: self.spec.dim,
                cover_h: self.spec.horizon,
                mdp: mdp.dim(),
                mdp_h: mdp.horizon(),
            });
        }
        self.policies.iter().map(|p| p.to_tabular(mdp)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cover serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CoverError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds a cover of the per-step unit ball in `R^d`, `horizon` times.
///
/// Grid mode uses the cubic lattice of spacing `2 eps' / (H sqrt d)`: every
/// ball point is within `eps' / H` of the nearest lattice point, and the
/// projection onto the ball does not increase that distance, so untruncated
/// nets cover at radius `eps'` in `sum_h ||w_h - w*_h||`. Parameter tuples
/// are emitted shell by shell (all tuples over the first `t` per-step points
/// before any tuple using point `t`), so a truncated grid is the coarsest
/// sub-net that fits the budget. The zero policy always comes first.
pub fn build_cover(spec: CoverSpec) -> Result<PolicyCover, CoverError> {
    if spec.budget == 0 {
        return Err(CoverError::EmptyBudget);
    }
    if !(spec.eps_prime > 0.0 && spec.eps_prime <= 1.0) {
        return Err(CoverError::Resolution(spec.eps_prime));
    }
    if !(spec.temperature > 0.0 && spec.temperature.is_finite()) {
        return Err(CoverError::Temperature(spec.temperature));
    }
    let (params, covering_radius) = match spec.mode {
        CoverMode::Grid => grid_params(&spec)?,
        CoverMode::Random => (random_params(&spec), None),
        CoverMode::Explicit => (vec![vec![DVector::zeros(spec.dim); spec.horizon]], None),
    };
    let policies = params
        .into_iter()
        .map(|p| CoverPolicy::Softmax(SoftmaxPolicy { params: p, temperature: spec.temperature }))
        .collect();
    Ok(PolicyCover { policies, spec, covering_radius })
}

/// Lattice points near the unit ball, projected onto it and ordered by norm.
pub fn ball_lattice(dim: usize, spacing: f64) -> Result<Vec<DVector<f64>>, CoverError> {
    let reach = 1.0 + spacing * (dim as f64).sqrt() / 2.0;
    let n = (reach / spacing).floor() as i64;
    let side = (2 * n + 1) as u64;
    let candidates = side.checked_pow(dim as u32).unwrap_or(u64::MAX);
    if candidates > MAX_LATTICE_CANDIDATES {
        return Err(CoverError::GridTooLarge(candidates));
    }
    let mut points: Vec<DVector<f64>> = Vec::new();
    let mut idx = vec![-n; dim];
    loop {
        let x = DVector::from_iterator(dim, idx.iter().map(|&i| i as f64 * spacing));
        let norm = x.norm();
        if norm <= reach + 1e-12 {
            points.push(if norm > 1.0 { x / norm } else { x });
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == dim {
                return Ok(finish_lattice(points));
            }
            idx[pos] += 1;
            if idx[pos] > n {
                idx[pos] = -n;
                pos += 1;
            } else {
                break;
            }
        }
    }
}

fn finish_lattice(mut points: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let key = |v: &DVector<f64>| (v.norm(), v.as_slice().to_vec());
    points.sort_by(|a, b| {
        let (na, la) = key(a);
        let (nb, lb) = key(b);
        na.total_cmp(&nb).then_with(|| {
            la.iter()
                .zip(&lb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    points.dedup_by(|a, b| (&*a - &*b).norm() < 1e-12);
    points
}

type ParamSets = (Vec<Vec<DVector<f64>>>, Option<f64>);

fn grid_params(spec: &CoverSpec) -> Result<ParamSets, CoverError> {
    let spacing = 2.0 * spec.eps_prime / (spec.horizon.max(1) as f64 * (spec.dim as f64).sqrt());
    let points = ball_lattice(spec.dim, spacing)?;
    let m = points.len();
    let full = (m as u128).checked_pow(spec.horizon as u32).unwrap_or(u128::MAX);
    let complete = full <= spec.budget as u128;
    let mut out = Vec::new();
    'shells: for t in 0..m {
        // Tuples in {0..=t}^H with max exactly t, in lexicographic order.
        let mut tuple = vec![0usize; spec.horizon];
        loop {
            if tuple.contains(&t) || spec.horizon == 0 {
                out.push(tuple.iter().map(|&i| points[i].clone()).collect());
                if out.len() == spec.budget {
                    break 'shells;
                }
            }
            if spec.horizon == 0 {
                break 'shells;
            }
            let mut pos = spec.horizon;
            loop {
                if pos == 0 {
                    continue 'shells;
                }
                pos -= 1;
                tuple[pos] += 1;
                if tuple[pos] > t {
                    tuple[pos] = 0;
                } else {
                    break;
                }
            }
        }
    }
    Ok((out, complete.then_some(spec.eps_prime)))
}

/// Uniform point in the unit ball of `R^d`.
pub fn uniform_ball_point<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)));
        let norm: f64 = g.norm();
        if norm > 0.0 {
            let u: f64 = rng.random();
            return g * (u.powf(1.0 / dim as f64) / norm);
        }
    }
}

fn random_params(spec: &CoverSpec) -> Vec<Vec<DVector<f64>>> {
    let mut rng = linalg::stream_rng(spec.seed, 0x636f766572);
    let mut out = vec![vec![DVector::zeros(spec.dim); spec.horizon]];
    for _ in 1..spec.budget {
        out.push((0..spec.horizon).map(|_| uniform_ball_point(spec.dim, &mut rng)).collect());
    }
    out
}

/// `theta_bar_h = (1/K) sum_k theta_{k,h}`.
pub fn average_loss(losses: &LossSequence) -> Vec<DVector<f64>> {
    let k = losses.num_episodes();
    let mut mean = vec![DVector::zeros(losses.dim()); losses.horizon()];
    for episode in losses.thetas() {
        for (m, t) in mean.iter_mut().zip(episode) {
            *m += t;
        }
    }
    for m in mean.iter_mut() {
        *m /= k.max(1) as f64;
    }
    mean
}

/// `values[i][k] = V_k^{pi_i}`.
pub fn policy_values(mdp: &LinearMdp, policies: &[Policy], losses: &LossSequence) -> Vec<Vec<f64>> {
    policies
        .iter()
        .map(|p| {
            let phi = exact_visitation(mdp, p).phi_pi;
            losses
                .thetas()
                .iter()
                .map(|theta| crate::mdp::value_from_visitation(&phi, theta))
                .collect()
        })
        .collect()
}

/// Lowest-index argmin of the cumulative value `sum_k V_k^pi`.
pub fn best_policy_brute_force(
    mdp: &LinearMdp,
    losses: &LossSequence,
    policies: &[Policy],
) -> Result<(usize, f64), CoverError> {
    if policies.is_empty() {
        return Err(CoverError::EmptySet);
    }
    let totals = policy_values(mdp, policies, losses)
        .into_iter()
        .map(|v| v.iter().sum::<f64>());
    Ok(argmin_first(totals))
}

/// Lowest-index argmin of the value under the averaged loss.
pub fn best_policy_average(
    mdp: &LinearMdp,
    losses: &LossSequence,
    policies: &[Policy],
) -> Result<(usize, f64), CoverError> {
    if policies.is_empty() {
        return Err(CoverError::EmptySet);
    }
    let mean = average_loss(losses);
    let values = policies.iter().map(|p| {
        crate::mdp::value_from_visitation(&exact_visitation(mdp, p).phi_pi, &mean)
    });
    Ok(argmin_first(values))
}

fn argmin_first(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
}

/// Every deterministic Markov policy, `A^(S H)` of them.
pub fn all_deterministic_policies(num_states: usize, num_actions: usize, horizon: usize) -> Vec<Policy> {
    let slots = num_states * horizon;
    let total = num_actions.pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let mut actions = vec![vec![0; num_states]; horizon];
            for slot in 0..slots {
                actions[slot / num_states][slot % num_states] = code % num_actions;
                code /= num_actions;
            }
            Policy::deterministic(num_states, num_actions, &actions)
        })
        .collect()
}
