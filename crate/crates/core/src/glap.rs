//! Exponential weights over a policy cover with design-based exploration.
//!
//! Each episode the learner samples `pi_k ~ p_k` where
//! `p_k = (1 - gamma) w_k / W_k + gamma g`, `g` being the step-averaged
//! G-optimal design on the estimated visitations. The per-step scalar losses
//! of the episode give `theta_hat_h = Sigma_h^{-1} phi_hat_{pi_k,h} l_h` with
//! `Sigma_h = sum_pi p(pi) phi_hat_{pi,h} phi_hat_{pi,h}'`, every policy gets
//! the optimistic value
//! `V~^pi = sum_h phi_hat_{pi,h}' theta_hat_h - 2 ||phi_hat_{pi,h}||^2_{Sigma_h^{-1}} b`,
//! and weights move by `exp(-eta V~)` with `eta = gamma / (d H^2)`.
//!
//! Weights are stored as logarithms. Linear algebra at step `h` is carried
//! out in an orthonormal basis of the span of `{phi_hat_{pi,h}}`, so inverses
//! are pseudo-inverses whenever the estimates span a strict subspace.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureest::FeatureTable;
use crate::linalg;
use crate::mdp::{Environment, LossSequence, Policy};
use crate::optdesign::{g_optimal_design, mixed_design, DesignError, DesignOptions, DesignWeights, RANK_CUTOFF};

/// Jitter scale for Cholesky factorisations of `Sigma_h`.
pub const JITTER_SCALE: f64 = 1e-12;
/// Slack on the magnitude-bound checks.
pub const BOUND_SLACK: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlapError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("design at step {step} failed: {source}")]
    Design { step: usize, source: DesignError },
    #[error("covariance at step {0} is singular even after jitter")]
    Singular(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss sequence has {have} episodes, the run needs {need}")]
    ShortLosses { have: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPath {
    /// Recompute `sum_pi p(pi) u u'` every episode.
    Direct,
    /// Cache `gamma sum_pi g(pi) u u'` and recompute only the exploitation part.
    Split,
    /// `Split` when `|Pi| d^2` exceeds the threshold, else `Direct`.
    Auto { threshold: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlapConfig {
    pub gamma: f64,
    pub delta: f64,
    /// Number of episodes the run is tuned for.
    pub k: usize,
    /// Use `log(|Pi| / delta)` instead of `log(1 / delta)` in the bonus.
    pub bonus_log_pi: bool,
    pub design_tol: f64,
    pub design_max_iters: usize,
    pub sigma_path: SigmaPath,
}

impl GlapConfig {
    pub fn new(gamma: f64, delta: f64, k: usize) -> Self {
        Self {
            gamma,
            delta,
            k,
            bonus_log_pi: false,
            design_tol: 1e-6,
            design_max_iters: 1_000_000,
            sigma_path: SigmaPath::Auto { threshold: 4096 },
        }
    }

    /// `eta = gamma / (d H^2)`.
    pub fn eta(&self, dim: usize, horizon: usize) -> f64 {
        self.gamma / (dim as f64 * (horizon * horizon) as f64)
    }

    /// `sqrt(H log(1/delta) / (d K))`, the per-leverage bonus scale before the factor 2.
    pub fn bonus_scale(&self, dim: usize, horizon: usize, num_policies: usize) -> f64 {
        let log = if self.bonus_log_pi {
            (num_policies as f64 / self.delta).ln()
        } else {
            (1.0 / self.delta).ln()
        };
        (horizon as f64 * log / (dim as f64 * self.k.max(1) as f64)).sqrt()
    }

    /// `4 d H log(|Pi| / delta)`, the horizon above which `|eta V~| <= 1` is expected.
    pub fn min_k_for_bounds(&self, dim: usize, horizon: usize, num_policies: usize) -> f64 {
        4.0 * (dim * horizon) as f64 * (num_policies as f64 / self.delta).ln()
    }

    pub fn validate(&self) -> Result<(), GlapError> {
        if !(self.gamma > 0.0 && self.gamma <= 0.5) {
            return Err(GlapError::Config(format!("gamma must be in (0, 1/2], got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(GlapError::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.design_tol > 0.0) {
            return Err(GlapError::Config("design_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Simulator,
    NoSimulator,
}

impl std::str::FromStr for PresetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulator" => Ok(Self::Simulator),
            "no_simulator" | "live" => Ok(Self::NoSimulator),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

/// Tuned accuracy and exploration rate for a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub eps: f64,
    pub gamma: f64,
    pub eps_clamped: bool,
    pub gamma_clamped: bool,
}

impl Preset {
    pub fn compute(kind: PresetKind, dim: usize, horizon: usize, num_policies: usize, k: usize, delta: f64) -> Self {
        let (d, h, kf) = (dim as f64, horizon as f64, k.max(1) as f64);
        let log_k = (kf / delta).ln();
        let (eps, gamma) = match kind {
            PresetKind::Simulator => (
                d * h * h * log_k / kf,
                (d * h * (num_policies as f64 / delta).ln() / kf).sqrt(),
            ),
            PresetKind::NoSimulator => (
                kf.powf(-0.4) * (d * h).powf(1.8) * log_k.powf(0.4),
                kf.powf(-0.2) * (d * h).powf(1.4) * log_k.powf(0.2),
            ),
        };
        let clamp = |x: f64, name: &str| {
            if x > 0.5 {
                log::warn!("preset {name} = {x:.4} exceeds 1/2 at K = {k}; clamped");
                (0.5, true)
            } else {
                (x, false)
            }
        };
        let (eps, eps_clamped) = clamp(eps, "eps");
        let (gamma, gamma_clamped) = clamp(gamma, "gamma");
        Self { eps, gamma, eps_clamped, gamma_clamped }
    }
}

/// Per-step quantities in the reduced coordinates of the estimate span.
#[derive(Debug, Clone)]
struct StepSpace {
    /// `d x r` orthonormal basis.
    basis: DMatrix<f64>,
    /// `u[pi] = basis' phi_hat_{pi,h}`.
    coords: Vec<DVector<f64>>,
    /// `gamma sum_pi g(pi) u u'`.
    explore: DMatrix<f64>,
    /// Current `Sigma_h` in reduced coordinates and its factor.
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Debug, Clone)]
pub struct HedgeState {
    log_w: Vec<f64>,
    /// `(1 - gamma) w / W + gamma g`.
    p: Vec<f64>,
    design: DesignWeights,
    step_designs: Vec<DesignWeights>,
    steps: Vec<StepSpace>,
    gamma: f64,
    dim: usize,
    horizon: usize,
    split: bool,
    episode: usize,
    jitter_events: usize,
}

/// Magnitudes observed in one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub max_leverage: f64,
    pub max_abs_estimate: f64,
    pub max_abs_eta_v: f64,
}

fn span_basis(vectors: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let n = vectors.len() as f64;
    let moment = linalg::weighted_second_moment(dim, vectors.iter().map(|v| (1.0 / n, v)));
    let eig = SymmetricEigen::new(moment);
    let max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..dim).filter(|&i| eig.eigenvalues[i] > RANK_CUTOFF * max).collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// FNV-1a over the little-endian bytes of `p`.
pub fn probability_hash(p: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for x in p {
        for b in x.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Sets up the hedge: unit weights, per-step designs on the estimates and
/// their average.
pub fn glap_init(table: &FeatureTable, cfg: &GlapConfig) -> Result<HedgeState, GlapError> {
    cfg.validate()?;
    let n = table.num_policies();
    let horizon = table.horizon();
    let dim = table.dim();
    if n == 0 || horizon == 0 || dim == 0 {
        return Err(GlapError::Shape("feature table is empty".into()));
    }
    if table.phi_hat.iter().any(|p| p.len() != horizon || p.iter().any(|v| v.len() != dim)) {
        return Err(GlapError::Shape("feature table is ragged".into()));
    }
    let step_designs = (0..horizon)
        .map(|h| {
            g_optimal_design(
                &table.step(h),
                DesignOptions { tol: cfg.design_tol, max_iters: Some(cfg.design_max_iters) },
            )
                .map_err(|source| GlapError::Design { step: h, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let design = mixed_design(&step_designs).map_err(|source| GlapError::Design { step: 0, source })?;
    let split = match cfg.sigma_path {
        SigmaPath::Direct => false,
        SigmaPath::Split => true,
        SigmaPath::Auto { threshold } => n * dim * dim > threshold,
    };
    let gamma = cfg.gamma;
    let mut steps = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let phis = table.step(h);
        let basis = span_basis(&phis, dim);
        let coords: Vec<DVector<f64>> = phis.iter().map(|v| basis.tr_mul(v)).collect();
        let r = basis.ncols();
        let explore = linalg::weighted_second_moment(
            r,
            design.weights.iter().map(|&g| gamma * g).zip(coords.iter()),
        );
        let placeholder = Cholesky::new(DMatrix::identity(r, r)).expect("identity is SPD");
        steps.push(StepSpace { basis, coords, explore, sigma: DMatrix::zeros(r, r), chol: placeholder });
    }
    let mut state = HedgeState {
        log_w: vec![0.0; n],
        p: vec![0.0; n],
        design,
        step_designs,
        steps,
        gamma,
        dim,
        horizon,
        split,
        episode: 0,
        jitter_events: 0,
    };
    state.refresh()?;
    Ok(state)
}

impl HedgeState {
    pub fn num_policies(&self) -> usize {
        self.p.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    /// `w / W`.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.log_w);
        self.log_w.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn design(&self) -> &DesignWeights {
        &self.design
    }

    pub fn step_designs(&self) -> &[DesignWeights] {
        &self.step_designs
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn jitter_events(&self) -> usize {
        self.jitter_events
    }

    pub fn uses_split_path(&self) -> bool {
        self.split
    }

    /// Dimension of the estimate span at step `h`.
    pub fn rank(&self, h: usize) -> usize {
        self.steps[h].basis.ncols()
    }

    /// `Sigma_h` in the original coordinates.
    pub fn sigma(&self, h: usize) -> DMatrix<f64> {
        let s = &self.steps[h];
        &s.basis * &s.sigma * s.basis.transpose()
    }

    /// `||phi_hat_{pi,h}||^2_{Sigma_h^{-1}}`.
    pub fn leverage(&self, pi: usize, h: usize) -> f64 {
        let s = &self.steps[h];
        linalg::leverage(&s.chol, &s.coords[pi])
    }

    pub fn max_leverage(&self) -> f64 {
        (0..self.horizon)
            .flat_map(|h| (0..self.num_policies()).map(move |pi| (pi, h)))
            .map(|(pi, h)| self.leverage(pi, h))
            .fold(0.0, f64::max)
    }

    /// Replaces the log-weights and rebuilds `p` and `Sigma`.
    pub fn set_log_weights(&mut self, log_w: Vec<f64>) -> Result<(), GlapError> {
        if log_w.len() != self.log_w.len() || log_w.iter().any(|x| !x.is_finite()) {
            return Err(GlapError::Shape("log-weights must be finite, one per policy".into()));
        }
        self.log_w = log_w;
        self.refresh()
    }

    /// Switches between the direct and split covariance paths.
    pub fn set_split_path(&mut self, split: bool) -> Result<(), GlapError> {
        self.split = split;
        self.refresh()
    }

    fn refresh(&mut self) -> Result<(), GlapError> {
        let q = self.normalized_weights();
        let gamma = self.gamma;
        for (pi, p) in self.p.iter_mut().enumerate() {
            *p = (1.0 - gamma) * q[pi] + gamma * self.design.weights[pi];
        }
        for h in 0..self.horizon {
            let s = &mut self.steps[h];
            let r = s.basis.ncols();
            s.sigma = if self.split {
                let mut m = s.explore.clone();
                for (pi, u) in s.coords.iter().enumerate() {
                    let w = (1.0 - gamma) * q[pi];
                    if w != 0.0 {
                        m.ger(w, u, u, 1.0);
                    }
                }
                m
            } else {
                linalg::weighted_second_moment(r, self.p.iter().copied().zip(s.coords.iter()))
            };
            let (chol, jittered) =
                linalg::cholesky_with_jitter(&s.sigma, JITTER_SCALE).ok_or(GlapError::Singular(h))?;
            if jittered {
                self.jitter_events += 1;
                log::debug!("jitter added to Sigma at step {h}, episode {}", self.episode);
            }
            s.chol = chol;
        }
        Ok(())
    }

    /// `theta_hat_h = Sigma_h^{-1} phi_hat_{chosen,h} loss` in original coordinates.
    pub fn theta_hat(&self, h: usize, chosen: usize, loss: f64) -> DVector<f64> {
        let s = &self.steps[h];
        &s.basis * (s.chol.solve(&s.coords[chosen]) * loss)
    }

    /// `estimates[pi][h] = phi_hat_{pi,h}' theta_hat_h`.
    pub fn loss_estimates(&self, chosen: usize, losses: &[f64]) -> Vec<Vec<f64>> {
        let per_step: Vec<Vec<f64>> = (0..self.horizon)
            .map(|h| {
                let s = &self.steps[h];
                let x = s.chol.solve(&s.coords[chosen]) * losses[h];
                s.coords.iter().map(|u| u.dot(&x)).collect()
            })
            .collect();
        (0..self.num_policies())
            .map(|pi| per_step.iter().map(|row| row[pi]).collect())
            .collect()
    }

    /// Closed-form `E_{pi_k ~ p}[phi_hat_{pi,h}' theta_hat_h]` when the chosen
    /// policy's step-`h` loss has mean `true_phi[pi_k]' theta`.
    pub fn expected_estimates(&self, h: usize, true_phi: &[DVector<f64>], theta: &DVector<f64>) -> Vec<f64> {
        let s = &self.steps[h];
        let mut mean = DVector::zeros(s.basis.ncols());
        for (pi, u) in s.coords.iter().enumerate() {
            mean.axpy(self.p[pi] * true_phi[pi].dot(theta), u, 1.0);
        }
        let x = s.chol.solve(&mean);
        s.coords.iter().map(|u| u.dot(&x)).collect()
    }

    /// Optimistic values `V~^pi` given the chosen policy and its per-step losses.
    pub fn optimistic_values(&self, chosen: usize, losses: &[f64], bonus_scale: f64) -> (Vec<f64>, UpdateStats) {
        let estimates = self.loss_estimates(chosen, losses);
        let mut stats = UpdateStats::default();
        let values = estimates
            .iter()
            .enumerate()
            .map(|(pi, row)| {
                (0..self.horizon)
                    .map(|h| {
                        let lev = self.leverage(pi, h);
                        stats.max_leverage = stats.max_leverage.max(lev);
                        stats.max_abs_estimate = stats.max_abs_estimate.max(row[h].abs());
                        row[h] - 2.0 * lev * bonus_scale
                    })
                    .sum()
            })
            .collect();
        (values, stats)
    }

    /// `log w -= eta V~` followed by a rebuild of `p` and `Sigma`.
    pub fn apply_values(&mut self, values: &[f64], eta: f64) -> Result<(), GlapError> {
        for (lw, v) in self.log_w.iter_mut().zip(values) {
            *lw -= eta * v;
        }
        // Shift so the largest log-weight is zero; p is unaffected.
        let max = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for lw in self.log_w.iter_mut() {
            *lw -= max;
        }
        self.refresh()
    }
}

/// Draws `pi_k ~ p_k`.
pub fn sample_policy(state: &HedgeState, rng: &mut dyn RngCore) -> usize {
    linalg::sample_categorical(&state.p, rng)
}

/// One hedge update from the chosen policy's per-step losses.
pub fn glap_update(
    state: &mut HedgeState,
    chosen: usize,
    losses: &[f64],
    cfg: &GlapConfig,
) -> Result<UpdateStats, GlapError> {
    if losses.len() != state.horizon {
        return Err(GlapError::Shape(format!("expected {} losses, got {}", state.horizon, losses.len())));
    }
    if chosen >= state.num_policies() {
        return Err(GlapError::Shape(format!("policy index {chosen} out of range")));
    }
    let bonus = cfg.bonus_scale(state.dim, state.horizon, state.num_policies());
    let eta = cfg.eta(state.dim, state.horizon);
    let (values, mut stats) = state.optimistic_values(chosen, losses, bonus);
    stats.max_abs_eta_v = values.iter().map(|v| (eta * v).abs()).fold(0.0, f64::max);
    state.apply_values(&values, eta)?;
    state.episode += 1;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub chosen_policy: usize,
    pub realized_loss: f64,
    /// `V_k^{pi_k}`; NaN when no oracle values are supplied.
    pub exact_value: f64,
    pub cum_regret: f64,
    pub p_entropy: f64,
    pub max_leverage: f64,
    pub p_hash: u64,
}

/// Counts of magnitude-bound violations over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundReport {
    pub leverage_violations: usize,
    pub estimate_violations: usize,
    pub eta_v_violations: usize,
    /// Whether the `|eta V~| <= 1` check applies at this horizon.
    pub eta_v_checked: bool,
    pub max_leverage_ratio: f64,
    pub max_estimate_ratio: f64,
    pub max_abs_eta_v: f64,
}

impl BoundReport {
    pub fn clean(&self) -> bool {
        self.leverage_violations == 0 && self.estimate_violations == 0 && self.eta_v_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Best policy in the cover over the run, when values were supplied.
    pub best_policy: Option<usize>,
    pub final_p: Vec<f64>,
    pub bounds: BoundReport,
    pub jitter_events: usize,
    /// Regret charged before the first episode (e.g. live-mode estimation).
    pub regret_offset: f64,
}

pub const TRACE_HEADER: &str =
    "episode,chosen_policy,realized_loss,exact_value,cum_regret_vs_best_in_cover,p_entropy,max_leverage";

impl RunTrace {
    pub fn empty(offset: f64) -> Self {
        Self {
            records: Vec::new(),
            best_policy: None,
            final_p: Vec::new(),
            bounds: BoundReport::default(),
            jitter_events: 0,
            regret_offset: offset,
        }
    }

    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(self.regret_offset, |r| r.cum_regret)
    }

    /// Cumulative regret after `k` episodes.
    pub fn regret_at(&self, k: usize) -> f64 {
        if k == 0 {
            self.regret_offset
        } else {
            self.records[k - 1].cum_regret
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.episode, r.chosen_policy, r.realized_loss, r.exact_value, r.cum_regret, r.p_entropy, r.max_leverage
            )
            .expect("writing to a string");
        }
        out
    }
}

/// Regret bookkeeping against the best fixed policy of a value table.
#[derive(Debug, Clone)]
pub struct RegretTracker<'a> {
    values: Option<&'a [Vec<f64>]>,
    best: Option<usize>,
    cum: f64,
}

impl<'a> RegretTracker<'a> {
    /// `values[pi][k] = V_k^pi` over the first `k_total` episodes.
    pub fn new(values: Option<&'a [Vec<f64>]>, k_total: usize, offset: f64) -> Self {
        let best = values.map(|v| {
            v.iter()
                .map(|row| row[..k_total].iter().sum::<f64>())
                .enumerate()
                .fold((0, f64::INFINITY), |b, (i, t)| if t < b.1 { (i, t) } else { b })
                .0
        });
        Self { values, best, cum: offset }
    }

    pub fn best(&self) -> Option<usize> {
        self.best
    }

    /// Records episode `k` played with `pi`; returns `(V_k^pi, cumulative regret)`.
    pub fn record(&mut self, k: usize, pi: usize) -> (f64, f64) {
        match (self.values, self.best) {
            (Some(v), Some(b)) => {
                let value = v[pi][k];
                self.cum += value - v[b][k];
                (value, self.cum)
            }
            _ => (f64::NAN, f64::NAN),
        }
    }
}

/// Plays `cfg.k` episodes of GLAP against `losses`.
///
/// `policies` are the tabular forms of the cover (used only to act in the
/// environment); `values[pi][k]`, when given, are the true values used for
/// the exact-value and regret columns.
#[allow(clippy::too_many_arguments)]
pub fn run_glap(
    env: &mut dyn Environment,
    policies: &[Policy],
    table: &FeatureTable,
    cfg: &GlapConfig,
    losses: &LossSequence,
    values: Option<&[Vec<f64>]>,
    regret_offset: f64,
    rng: &mut dyn RngCore,
) -> Result<RunTrace, GlapError> {
    if policies.len() != table.num_policies() {
        return Err(GlapError::Shape("policy list and feature table differ in length".into()));
    }
    if losses.num_episodes() < cfg.k {
        return Err(GlapError::ShortLosses { have: losses.num_episodes(), need: cfg.k });
    }
    if cfg.k == 0 {
        return Ok(RunTrace::empty(regret_offset));
    }
    let mut state = glap_init(table, cfg)?;
    let (dim, horizon, n) = (state.dim, state.horizon, state.num_policies());
    let lev_bound = (dim * horizon) as f64 / cfg.gamma;
    let mut bounds = BoundReport {
        eta_v_checked: cfg.k as f64 >= cfg.min_k_for_bounds(dim, horizon, n),
        ..Default::default()
    };
    if !bounds.eta_v_checked {
        log::warn!(
            "K = {} is below 4 d H log(|Pi|/delta) = {:.1}; |eta V~| <= 1 is not guaranteed",
            cfg.k,
            cfg.min_k_for_bounds(dim, horizon, n)
        );
    }
    let mut tracker = RegretTracker::new(values, cfg.k, regret_offset);
    let mut records = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let p_entropy = entropy(&state.p);
        let p_hash = probability_hash(&state.p);
        let chosen = sample_policy(&state, rng);
        let traj = env.run_episode(&policies[chosen], losses.episode(k), rng);
        let observed = traj.losses();
        let stats = glap_update(&mut state, chosen, &observed, cfg)?;
        if stats.max_leverage > lev_bound + BOUND_SLACK {
            bounds.leverage_violations += 1;
        }
        if stats.max_abs_estimate > lev_bound + BOUND_SLACK {
            bounds.estimate_violations += 1;
        }
        if bounds.eta_v_checked && stats.max_abs_eta_v > 1.0 + BOUND_SLACK {
            bounds.eta_v_violations += 1;
        }
        bounds.max_leverage_ratio = bounds.max_leverage_ratio.max(stats.max_leverage / lev_bound);
        bounds.max_estimate_ratio = bounds.max_estimate_ratio.max(stats.max_abs_estimate / lev_bound);
        bounds.max_abs_eta_v = bounds.max_abs_eta_v.max(stats.max_abs_eta_v);
        let (exact_value, cum_regret) = tracker.record(k, chosen);
        records.push(TraceRecord {
            episode: k + 1,
            chosen_policy: chosen,
            realized_loss: traj.total_loss(),
            exact_value,
            cum_regret,
            p_entropy,
            max_leverage: stats.max_leverage,
            p_hash,
        });
    }
    Ok(RunTrace {
        records,
        best_policy: tracker.best(),
        final_p: state.p.clone(),
        bounds,
        jitter_events: state.jitter_events,
        regret_offset,
    })
}
