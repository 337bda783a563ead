//! Small dense linear-algebra and sampling helpers shared by the modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

/// Deterministic RNG for a `(seed, stream)` pair. Distinct streams are
/// independent sequences under the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank with the relative eigenvalue cutoff used throughout the crate.
pub fn numerical_rank(m: &DMatrix<f64>, rel_cutoff: f64) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues
        .iter()
        .filter(|&&l| l > rel_cutoff * max)
        .count()
}

/// Smallest squared pivot accepted, relative to the largest.
const PIVOT_CUTOFF: f64 = 1e-13;

fn well_pivoted(c: &Cholesky<f64, Dyn>) -> bool {
    let l = c.l_dirty();
    let pivots = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]);
    let (lo, hi) = pivots.fold((f64::INFINITY, 0.0_f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
    lo > PIVOT_CUTOFF * hi
}

/// Cholesky factorisation of a symmetric positive definite matrix. When the
/// plain factorisation fails or has a vanishing pivot, retries once with
/// `jitter_scale * trace / d` on the diagonal. Returns the factor and whether
/// jitter was needed.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    jitter_scale: f64,
) -> Option<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        if well_pivoted(&c) {
            return Some((c, false));
        }
    }
    let d = m.nrows().max(1) as f64;
    let jitter = jitter_scale * m.trace() / d;
    if !(jitter > 0.0) {
        return None;
    }
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).map(|c| (c, true))
}

/// `v' M^{-1} v` through a Cholesky factor of `M`.
pub fn leverage(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    v.dot(&chol.solve(v))
}

/// Sum of `w_i v_i v_i'` over the columns of `vectors`.
pub fn weighted_second_moment<'a, I>(dim: usize, items: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = (f64, &'a DVector<f64>)>,
{
    let mut m = DMatrix::zeros(dim, dim);
    for (w, v) in items {
        if w != 0.0 {
            m.ger(w, v, v, 1.0);
        }
    }
    m
}

/// Draw an index from a discrete distribution by inverse CDF. Falls back to
/// the last index with positive mass when rounding leaves the draw past the
/// cumulative total.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Multinomial counts for `n` draws from `probs` via sequential conditional
/// binomials. `probs` need only be nonnegative; it is renormalised.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining_n = n;
    let mut remaining_mass: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining_n == 0 || remaining_mass <= 0.0 {
            break;
        }
        let p = p.max(0.0);
        let q = (p / remaining_mass).clamp(0.0, 1.0);
        let draw = if q >= 1.0 {
            remaining_n
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining_n, q)
                .expect("binomial parameters are in range")
                .sample(rng)
        };
        counts[i] = draw;
        remaining_n -= draw;
        remaining_mass -= p;
    }
    if remaining_n > 0 {
        // Rounding exhausted the mass early; put the rest on the last atom with mass.
        if let Some(i) = probs.iter().rposition(|&p| p > 0.0) {
            counts[i] += remaining_n;
        }
    }
    counts
}

/// Serde adapter: `Vec<DVector<f64>>` as nested arrays.
pub mod serde_vectors {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Ok(rows.into_iter().map(DVector::from_vec).collect())
    }
}

/// Serde adapter: `Vec<Vec<DVector<f64>>>` as triply nested arrays.
pub mod serde_nested_vectors {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<DVector<f64>>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<&[f64]>> = v
            .iter()
            .map(|inner| inner.iter().map(|x| x.as_slice()).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Vec<Vec<DVector<f64>>>, D::Error> {
        let rows: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|inner| inner.into_iter().map(DVector::from_vec).collect())
            .collect())
    }
}
