//! G-optimal experimental design over a finite set of vectors.
//!
//! By the Kiefer-Wolfowitz equivalence theorem the design minimising the
//! worst-case leverage `max_i v_i' V(g)^{-1} v_i` is the D-optimal one, and
//! its optimum equals the dimension `r` of the span. We maximise `log det V(g)`
//! with Frank-Wolfe using exact line search in both the toward and the away
//! direction (Wolfe-Atwood), and stop once the leverage certificate
//! `max_i v_i' V(g)^{-1} v_i <= r (1 + tol)` holds.
//!
//! Rank-deficient sets are handled by working in an orthonormal basis of the
//! span, so leverages are pseudo-inverse leverages and the target is the rank.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Relative eigenvalue cutoff defining the span of the input vectors.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Weights below this are dropped after the solve.
pub const PRUNE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("design needs at least one vector")]
    Empty,
    #[error("all vectors are zero")]
    AllZero,
    #[error("vectors have inconsistent dimensions")]
    Dimensions,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("no convergence after {iterations} iterations (best max leverage {best_bound}, target {target})")]
    NonConvergence { iterations: usize, best_bound: f64, target: f64 },
    #[error("designs are over different index sets ({0} vs {1})")]
    MismatchedIndexSets(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOptions {
    pub tol: f64,
    /// Defaults to `10 * n * d` when `None`.
    pub max_iters: Option<usize>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self { tol: 0.01, max_iters: None }
    }
}

impl DesignOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iters: None }
    }
}

/// A probability distribution over the input vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignWeights {
    /// `weights[i]` is the mass on item `i`.
    pub weights: Vec<f64>,
    pub support_size: usize,
    /// Achieved maximum leverage over the items.
    pub certified_bound: f64,
    /// Dimension of the span the leverages are measured in.
    pub rank: usize,
    pub iterations: usize,
}

impl DesignWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `rank * (1 + tol)`, the bound this design was certified against.
    pub fn target(&self, tol: f64) -> f64 {
        self.rank as f64 * (1.0 + tol)
    }
}

/// Coordinates of the input vectors in an orthonormal basis of their span.
fn reduce_to_span(vectors: &[DVector<f64>]) -> (Vec<DVector<f64>>, usize) {
    let d = vectors[0].len();
    let n = vectors.len() as f64;
    let moment = linalg::weighted_second_moment(d, vectors.iter().map(|v| (1.0 / n, v)));
    let eig = SymmetricEigen::new(moment);
    let max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..d)
        .filter(|&i| eig.eigenvalues[i] > RANK_CUTOFF * max)
        .collect();
    let basis = DMatrix::from_fn(d, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let reduced = vectors.iter().map(|v| basis.tr_mul(v)).collect();
    (reduced, keep.len())
}

fn moment_of(reduced: &[DVector<f64>], weights: &[f64], r: usize) -> DMatrix<f64> {
    linalg::weighted_second_moment(r, weights.iter().copied().zip(reduced.iter()))
}

/// Leverages `u_i' V^{-1} u_i` for all items, or `None` if `V` is singular.
fn leverages(reduced: &[DVector<f64>], v: &DMatrix<f64>) -> Option<Vec<f64>> {
    let chol = nalgebra::Cholesky::new(v.clone())?;
    Some(reduced.iter().map(|u| linalg::leverage(&chol, u)).collect())
}

/// Optimal log-det step toward item with leverage `kappa` (negative = away).
fn line_search(kappa: f64, r: f64) -> f64 {
    (kappa - r) / (r * (kappa - 1.0))
}

/// Computes a G-optimal design over `vectors`.
pub fn g_optimal_design(
    vectors: &[DVector<f64>],
    opts: DesignOptions,
) -> Result<DesignWeights, DesignError> {
    if vectors.is_empty() {
        return Err(DesignError::Empty);
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(DesignError::Dimensions);
    }
    if !(opts.tol > 0.0) {
        return Err(DesignError::Tolerance(opts.tol));
    }
    if vectors.iter().all(|v| v.iter().all(|&x| x == 0.0)) {
        return Err(DesignError::AllZero);
    }
    let n = vectors.len();
    let max_iters = opts.max_iters.unwrap_or(10 * n * d.max(1));
    let (reduced, r) = reduce_to_span(vectors);
    let rf = r as f64;
    let target = rf * (1.0 + opts.tol);

    let mut weights = solve_weights(&reduced, r, target, max_iters)?;
    let iterations = weights.1;

    prune(&mut weights.0);
    caratheodory_reduce(&reduced, r, &mut weights.0);

    let v = moment_of(&reduced, &weights.0, r);
    let lev = leverages(&reduced, &v).ok_or(DesignError::NonConvergence {
        iterations,
        best_bound: f64::INFINITY,
        target,
    })?;
    let certified_bound = lev.iter().copied().fold(0.0, f64::max);
    if certified_bound > target {
        return Err(DesignError::NonConvergence { iterations, best_bound: certified_bound, target });
    }
    let support_size = weights.0.iter().filter(|&&w| w > 0.0).count();
    Ok(DesignWeights { weights: weights.0, support_size, certified_bound, rank: r, iterations })
}

fn solve_weights(
    reduced: &[DVector<f64>],
    r: usize,
    target: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize), DesignError> {
    let n = reduced.len();
    let rf = r as f64;
    let mut w = vec![1.0 / n as f64; n];
    let mut best_bound = f64::INFINITY;
    for iter in 0..=max_iters {
        let v = moment_of(reduced, &w, r);
        let Some(lev) = leverages(reduced, &v) else {
            return Err(DesignError::NonConvergence { iterations: iter, best_bound, target });
        };
        // Lowest index wins ties in both argmax and argmin.
        let (j_up, &k_up) = lev
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
        best_bound = best_bound.min(k_up);
        if k_up <= target {
            return Ok((w, iter));
        }
        if iter == max_iters {
            break;
        }
        let away = w
            .iter()
            .zip(&lev)
            .enumerate()
            .filter(|(_, (&wi, _))| wi > 0.0)
            .fold(None::<(usize, f64)>, |acc, (i, (_, &k))| match acc {
                Some((_, best)) if best <= k => acc,
                _ => Some((i, k)),
            });
        let use_away = match away {
            Some((j, k_down)) => w[j] < 1.0 && (rf - k_down) > (k_up - rf),
            None => false,
        };
        let (j, alpha) = if use_away {
            let (j, k_down) = away.expect("checked above");
            let floor = -w[j] / (1.0 - w[j]);
            let alpha = if k_down > 1.0 { line_search(k_down, rf).max(floor) } else { floor };
            (j, alpha)
        } else {
            (j_up, line_search(k_up, rf))
        };
        for wi in w.iter_mut() {
            *wi *= 1.0 - alpha;
        }
        w[j] += alpha;
        if use_away && w[j] <= f64::EPSILON * 4.0 {
            w[j] = 0.0;
        }
        let total: f64 = w.iter().map(|x| x.max(0.0)).sum();
        for wi in w.iter_mut() {
            *wi = wi.max(0.0) / total;
        }
    }
    Err(DesignError::NonConvergence { iterations: max_iters, best_bound, target })
}

fn prune(w: &mut [f64]) {
    for wi in w.iter_mut() {
        if *wi < PRUNE_THRESHOLD {
            *wi = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    for wi in w.iter_mut() {
        *wi /= total;
    }
}

/// Shrinks the support to at most `r(r+1)/2 + 1` points without changing
/// `V(g)`: while the lifted points `(vech(u u'), 1)` of the support are
/// affinely dependent, move along a null direction until a weight hits zero.
fn caratheodory_reduce(reduced: &[DVector<f64>], r: usize, w: &mut [f64]) {
    let lifted_dim = r * (r + 1) / 2 + 1;
    loop {
        let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        let m = support.len();
        if m <= lifted_dim {
            return;
        }
        // Common rescaling keeps the lifted columns scale-free.
        let scale = support.iter().map(|&i| reduced[i].norm()).fold(0.0, f64::max);
        let columns: Vec<DVector<f64>> = support.iter().map(|&i| &reduced[i] / scale).collect();
        let lifted = DMatrix::from_fn(lifted_dim, m, |row, col| {
            let u = &columns[col];
            if row + 1 == lifted_dim {
                return 1.0;
            }
            // Row index -> (i, j) with i <= j in the upper triangle.
            let mut idx = row;
            let mut i = 0;
            while idx >= r - i {
                idx -= r - i;
                i += 1;
            }
            let j = i + idx;
            u[i] * u[j]
        });
        let gram = lifted.tr_mul(&lifted);
        let eig = SymmetricEigen::new(gram);
        let (min_idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
        let z = eig.eigenvectors.column(min_idx).into_owned();
        let (pos, _) = z.iter().enumerate().filter(|(_, &zi)| zi > 0.0).fold(
            (usize::MAX, f64::INFINITY),
            |acc, (i, &zi)| {
                let ratio = w[support[i]] / zi;
                if ratio < acc.1 {
                    (i, ratio)
                } else {
                    acc
                }
            },
        );
        if pos == usize::MAX {
            return;
        }
        let t = w[support[pos]] / z[pos];
        for (i, &idx) in support.iter().enumerate() {
            w[idx] = (w[idx] - t * z[i]).max(0.0);
        }
        w[support[pos]] = 0.0;
        let total: f64 = w.iter().sum();
        for wi in w.iter_mut() {
            *wi /= total;
        }
    }
}

/// Coordinate-wise average of per-step designs over one index set.
///
/// The returned `certified_bound` is `H * max_h bound_h`: since the average
/// puts at least `g_h / H` on every item, each step's leverages under the
/// mixture are at most `H` times that step's certificate.
pub fn mixed_design(per_step: &[DesignWeights]) -> Result<DesignWeights, DesignError> {
    let first = per_step.first().ok_or(DesignError::Empty)?;
    let n = first.len();
    if let Some(bad) = per_step.iter().find(|g| g.len() != n) {
        return Err(DesignError::MismatchedIndexSets(n, bad.len()));
    }
    let h = per_step.len() as f64;
    let weights: Vec<f64> = (0..n)
        .map(|i| per_step.iter().map(|g| g.weights[i]).sum::<f64>() / h)
        .collect();
    let support_size = weights.iter().filter(|&&w| w > 0.0).count();
    Ok(DesignWeights {
        weights,
        support_size,
        certified_bound: h * per_step.iter().map(|g| g.certified_bound).fold(0.0, f64::max),
        rank: per_step.iter().map(|g| g.rank).max().unwrap_or(0),
        iterations: per_step.iter().map(|g| g.iterations).sum(),
    })
}
