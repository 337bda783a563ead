//! Oblivious loss sequences for experiments.
//!
//! Every generator rescales its raw vectors by one common factor so that
//! each loss on a reachable pair lies in `[-1, 1]`.

use glap_core::linalg::stream_rng;
use glap_core::{LinearMdp, LossSequence, MdpError};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::AdversaryKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub omega: f64,
    pub period: usize,
    pub seed: u64,
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Orthonormal pair spanning a random plane.
fn random_plane(dim: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    let u = gaussian(dim, rng).normalize();
    if dim == 1 {
        return (u.clone(), u);
    }
    loop {
        let mut v = gaussian(dim, rng);
        v -= &u * u.dot(&v);
        if v.norm() > 1e-8 {
            return (u, v.normalize());
        }
    }
}

/// Largest `|<phi(s,a), x>|` over pairs reachable at step `h`.
fn max_loss(mdp: &LinearMdp, reachable: &[Vec<bool>], h: usize, f: impl Fn(&DVector<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in (0..mdp.num_states()).filter(|&s| reachable[h][s]) {
        for a in 0..mdp.num_actions() {
            worst = worst.max(f(mdp.feature(s, a)));
        }
    }
    worst
}

/// `k` episodes of losses from `spec`.
///
/// The rescaling factor does not depend on `k`, so a shorter sequence from
/// the same spec is an exact prefix of a longer one. For drift the factor
/// bounds the loss over the whole circle of angles; for the random kinds
/// vector entries are uniform in `[-1, 1]` and the factor is `1 / max ||phi||_1`.
pub fn generate_losses(mdp: &LinearMdp, spec: &AdversarySpec, k: usize) -> Result<LossSequence, MdpError> {
    let (dim, horizon) = (mdp.dim(), mdp.horizon());
    let reachable = mdp.reachable_states();
    let mut rng = stream_rng(spec.seed, 0x61_6476);
    let l1_scale = || {
        let worst = (0..horizon)
            .map(|h| max_loss(mdp, &reachable, h, |phi| phi.lp_norm(1)))
            .fold(0.0, f64::max);
        if worst > 1.0 { 1.0 / worst } else { 1.0 }
    };
    let uniform = |rng: &mut ChaCha8Rng| -> Vec<DVector<f64>> {
        (0..horizon)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    };
    let thetas: Vec<Vec<DVector<f64>>> = match spec.kind {
        AdversaryKind::Fixed => {
            let base: Vec<DVector<f64>> = (0..horizon).map(|_| gaussian(dim, &mut rng)).collect();
            let one = LossSequence::normalized(mdp, vec![base])?;
            vec![one.episode(0).to_vec(); k]
        }
        AdversaryKind::Drift => {
            let planes: Vec<_> = (0..horizon).map(|_| random_plane(dim, &mut rng)).collect();
            let worst = planes
                .iter()
                .enumerate()
                .map(|(h, (u, v))| max_loss(mdp, &reachable, h, |phi| phi.dot(u).hypot(phi.dot(v))))
                .fold(0.0, f64::max);
            let scale = if worst > 1.0 { 1.0 / worst } else { 1.0 };
            (0..k)
                .map(|e| {
                    let angle = spec.omega * e as f64;
                    let (c, s) = (angle.cos() * scale, angle.sin() * scale);
                    planes.iter().map(|(u, v)| u * c + v * s).collect()
                })
                .collect()
        }
        AdversaryKind::Switching => {
            let period = spec.period.max(1);
            let scale = l1_scale();
            let mut current: Vec<DVector<f64>> = Vec::new();
            (0..k)
                .map(|e| {
                    if e % period == 0 {
                        current = uniform(&mut rng).into_iter().map(|t| t * scale).collect();
                    }
                    current.clone()
                })
                .collect()
        }
        AdversaryKind::Randomized => {
            let scale = l1_scale();
            (0..k)
                .map(|_| uniform(&mut rng).into_iter().map(|t| t * scale).collect())
                .collect()
        }
    };
    LossSequence::new(mdp, thetas)
}
