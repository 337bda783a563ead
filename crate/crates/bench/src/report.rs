//! Growth-exponent and query-complexity reports over experiment outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Growth exponents between a horizon `K` and `2K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SublinearityReport {
    /// `(seed, alpha)` for each seed with positive regret at both horizons.
    pub exponents: Vec<(u64, f64)>,
    /// Seeds dropped for nonpositive regret.
    pub excluded: Vec<u64>,
    pub median: Option<f64>,
    pub threshold: f64,
}

impl SublinearityReport {
    /// True when the median exponent exists and is at most the threshold.
    pub fn passed(&self) -> bool {
        self.median.is_some_and(|m| m <= self.threshold)
    }
}

impl fmt::Display for SublinearityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.median {
            Some(m) => write!(
                f,
                "median alpha = {m:.4} over {} seeds ({} excluded), threshold {} -> {}",
                self.exponents.len(),
                self.excluded.len(),
                self.threshold,
                if self.passed() { "pass" } else { "fail" }
            ),
            None => write!(f, "no seeds with positive regret ({} excluded) -> fail", self.excluded.len()),
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// `alpha = log2(Reg(2K) / Reg(K))` per seed present at both horizons.
pub fn sublinearity_report(at_k: &[(u64, f64)], at_2k: &[(u64, f64)], threshold: f64) -> SublinearityReport {
    let long: BTreeMap<u64, f64> = at_2k.iter().copied().collect();
    let mut exponents = Vec::new();
    let mut excluded = Vec::new();
    for &(seed, r1) in at_k {
        match long.get(&seed) {
            Some(&r2) if r1 > 0.0 && r2 > 0.0 => exponents.push((seed, (r2 / r1).log2())),
            Some(_) => excluded.push(seed),
            None => {}
        }
    }
    let alphas: Vec<f64> = exponents.iter().map(|e| e.1).collect();
    SublinearityReport { median: median(&alphas), exponents, excluded, threshold }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryComplexityReport {
    pub k: usize,
    /// `(seed, oracle episodes)`.
    pub oracle_episodes: Vec<(u64, u64)>,
    pub median_episodes: Option<f64>,
    /// Median oracle episodes over `K^2`.
    pub ratio: Option<f64>,
}

impl fmt::Display for QueryComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.median_episodes, self.ratio) {
            (Some(m), Some(r)) => write!(f, "K = {}: median oracle episodes {m:.0}, per K^2 {r:.4e}", self.k),
            _ => write!(f, "K = {}: no successful seeds", self.k),
        }
    }
}

pub fn query_complexity_report(k: usize, oracle_episodes: &[(u64, u64)]) -> QueryComplexityReport {
    let counts: Vec<f64> = oracle_episodes.iter().map(|e| e.1 as f64).collect();
    let median_episodes = median(&counts);
    QueryComplexityReport {
        k,
        oracle_episodes: oracle_episodes.to_vec(),
        median_episodes,
        ratio: median_episodes.map(|m| m / (k as f64 * k as f64)),
    }
}

/// Successful per-seed rows of a `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub k: usize,
    pub final_regret: f64,
    pub oracle_episodes: u64,
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join("summary.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty summary")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("missing column {name}"));
    let (c_row, c_status, c_k) = (col("row")?, col("status")?, col("K")?);
    let (c_regret, c_oracle) = (col("final_regret")?, col("oracle_episodes")?);
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            bail!("malformed summary line `{line}`");
        }
        if f[c_status] != "ok" {
            continue;
        }
        rows.push(SummaryRow {
            seed: f[c_row].parse()?,
            k: f[c_k].parse()?,
            final_regret: f[c_regret].parse()?,
            oracle_episodes: f[c_oracle].parse()?,
        });
    }
    Ok(rows)
}
