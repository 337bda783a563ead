//! Flat `key = value` experiment configuration with dotted sections.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use glap_core::glap::PresetKind;
use glap_core::CoverMode;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Glap,
    Uniform,
    Exp3ExactFeatures,
    BestFixedOracle,
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "glap" => Ok(Self::Glap),
            "uniform" => Ok(Self::Uniform),
            "exp3_exact_features" => Ok(Self::Exp3ExactFeatures),
            "best_fixed_oracle" => Ok(Self::BestFixedOracle),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Glap => "glap",
            Self::Uniform => "uniform",
            Self::Exp3ExactFeatures => "exp3_exact_features",
            Self::BestFixedOracle => "best_fixed_oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulator,
    Live,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulator" => Ok(Self::Simulator),
            "live" => Ok(Self::Live),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simulator => "simulator",
            Self::Live => "live",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryKind {
    Fixed,
    /// Per-step loss vectors rotate in a random plane at `omega` radians per episode.
    Drift,
    /// A fresh random vector every `period` episodes.
    Switching,
    /// I.i.d. random vectors every episode.
    Randomized,
}

impl FromStr for AdversaryKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "drift" => Ok(Self::Drift),
            "switching" => Ok(Self::Switching),
            "randomized" => Ok(Self::Randomized),
            other => Err(format!("unknown adversary `{other}`")),
        }
    }
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Drift => "drift",
            Self::Switching => "switching",
            Self::Randomized => "randomized",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Fixed,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSourceKind {
    Estimated,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpSection {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub dim: usize,
    pub seed: u64,
    pub file: Option<PathBuf>,
    pub init: InitKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarySection {
    pub kind: AdversaryKind,
    pub omega: f64,
    pub period: usize,
    pub seed: u64,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverSection {
    pub mode: CoverMode,
    pub budget: usize,
    pub eps_prime: f64,
    pub seed: u64,
    /// `None` means `2 sqrt(d K) H`.
    pub temperature: Option<f64>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlapSection {
    /// `None` takes the preset value.
    pub gamma: Option<f64>,
    pub delta: f64,
    pub eps: Option<f64>,
    pub k: usize,
    pub preset: PresetKind,
    pub bonus_log_pi: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSection {
    pub source: FeatureSourceKind,
    pub budget: u64,
    pub warmup: u64,
    pub floor: Option<f64>,
    pub perturb: f64,
    pub redesign_every: u64,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mdp: MdpSection,
    pub adversary: AdversarySection,
    pub cover: CoverSection,
    pub algorithm: Algorithm,
    pub glap: GlapSection,
    pub features: FeatureSection,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mdp: MdpSection {
                states: 6,
                actions: 3,
                horizon: 3,
                dim: 4,
                seed: 0,
                file: None,
                init: InitKind::Uniform,
            },
            adversary: AdversarySection {
                kind: AdversaryKind::Drift,
                omega: 1e-4,
                period: 1000,
                seed: 0,
                file: None,
            },
            cover: CoverSection {
                mode: CoverMode::Random,
                budget: 30,
                eps_prime: 1.0,
                seed: 0,
                temperature: None,
                file: None,
            },
            algorithm: Algorithm::Glap,
            glap: GlapSection {
                gamma: None,
                delta: 0.05,
                eps: None,
                k: 1000,
                preset: PresetKind::Simulator,
                bonus_log_pi: false,
            },
            features: FeatureSection {
                source: FeatureSourceKind::Estimated,
                budget: 1 << 40,
                warmup: 50,
                floor: None,
                perturb: 0.1,
                redesign_every: 25,
                file: None,
            },
            mode: Mode::Simulator,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`].
pub const KEYS: &[&str] = &[
    "mdp.S",
    "mdp.A",
    "mdp.H",
    "mdp.d",
    "mdp.seed",
    "mdp.file",
    "mdp.init",
    "adversary.kind",
    "adversary.omega",
    "adversary.period",
    "adversary.seed",
    "adversary.file",
    "cover.mode",
    "cover.budget",
    "cover.eps_prime",
    "cover.seed",
    "cover.temperature",
    "cover.file",
    "algorithm",
    "glap.gamma",
    "glap.delta",
    "glap.eps",
    "glap.K",
    "glap.preset",
    "glap.bonus_log_pi",
    "features.source",
    "features.budget",
    "features.warmup",
    "features.floor",
    "features.perturb",
    "features.redesign_every",
    "features.file",
    "mode",
    "seeds",
    "output.dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// `auto` maps to `None`.
fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

/// `a..b` (half-open) or a comma-separated list.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        key: "seeds".into(),
        value: value.into(),
        reason: reason.into(),
    };
    let seeds: Vec<u64> = if let Some((a, b)) = value.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad("range start is not an integer"))?;
        let b: u64 = b.trim().parse().map_err(|_| bad("range end is not an integer"))?;
        (a..b).collect()
    } else {
        value
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| bad("not an integer list")))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad("no seeds"));
    }
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` or `--key=value`.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), ConfigError> {
        let arg = arg.trim_start_matches("--");
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, text: arg.to_string() })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "mdp.S" => self.mdp.states = parse(key, value)?,
            "mdp.A" => self.mdp.actions = parse(key, value)?,
            "mdp.H" => self.mdp.horizon = parse(key, value)?,
            "mdp.d" => self.mdp.dim = parse(key, value)?,
            "mdp.seed" => self.mdp.seed = parse(key, value)?,
            "mdp.file" => self.mdp.file = parse_path(value),
            "mdp.init" => {
                self.mdp.init = match value {
                    "fixed" => InitKind::Fixed,
                    "uniform" => InitKind::Uniform,
                    _ => return Err(bad(key, value, "expected fixed or uniform")),
                }
            }
            "adversary.kind" => self.adversary.kind = parse(key, value)?,
            "adversary.omega" => self.adversary.omega = parse(key, value)?,
            "adversary.period" => {
                self.adversary.period = parse(key, value)?;
                if self.adversary.period == 0 {
                    return Err(bad(key, value, "period must be positive"));
                }
            }
            "adversary.seed" => self.adversary.seed = parse(key, value)?,
            "adversary.file" => self.adversary.file = parse_path(value),
            "cover.mode" => self.cover.mode = parse(key, value)?,
            "cover.budget" => self.cover.budget = parse(key, value)?,
            "cover.eps_prime" => self.cover.eps_prime = parse(key, value)?,
            "cover.seed" => self.cover.seed = parse(key, value)?,
            "cover.temperature" => self.cover.temperature = parse_auto(key, value)?,
            "cover.file" => self.cover.file = parse_path(value),
            "algorithm" => self.algorithm = parse(key, value)?,
            "glap.gamma" => self.glap.gamma = parse_auto(key, value)?,
            "glap.delta" => self.glap.delta = parse(key, value)?,
            "glap.eps" => self.glap.eps = parse_auto(key, value)?,
            "glap.K" => self.glap.k = parse(key, value)?,
            "glap.preset" => self.glap.preset = parse(key, value)?,
            "glap.bonus_log_pi" => self.glap.bonus_log_pi = parse(key, value)?,
            "features.source" => {
                self.features.source = match value {
                    "estimated" => FeatureSourceKind::Estimated,
                    "exact" => FeatureSourceKind::Exact,
                    _ => return Err(bad(key, value, "expected estimated or exact")),
                }
            }
            "features.budget" => self.features.budget = parse(key, value)?,
            "features.warmup" => self.features.warmup = parse(key, value)?,
            "features.floor" => self.features.floor = parse_auto(key, value)?,
            "features.perturb" => self.features.perturb = parse(key, value)?,
            "features.redesign_every" => self.features.redesign_every = parse(key, value)?,
            "features.file" => self.features.file = parse_path(value),
            "mode" => self.mode = parse(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.glap.k == 0 {
            return Err(ConfigError::Invalid("glap.K must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        if self.mdp.file.is_none()
            && (self.mdp.states == 0 || self.mdp.actions == 0 || self.mdp.horizon == 0 || self.mdp.dim == 0)
        {
            return Err(ConfigError::Invalid("mdp dimensions must be positive".into()));
        }
        if self.cover.budget == 0 {
            return Err(ConfigError::Invalid("cover.budget must be at least 1".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::Invalid("seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` listing of the configuration.
    pub fn echo(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("auto".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut lines = vec![
            format!("mdp.S = {}", self.mdp.states),
            format!("mdp.A = {}", self.mdp.actions),
            format!("mdp.H = {}", self.mdp.horizon),
            format!("mdp.d = {}", self.mdp.dim),
            format!("mdp.seed = {}", self.mdp.seed),
            format!("mdp.file = {}", path(&self.mdp.file)),
            format!("mdp.init = {}", if self.mdp.init == InitKind::Fixed { "fixed" } else { "uniform" }),
            format!("adversary.kind = {}", self.adversary.kind),
            format!("adversary.omega = {}", self.adversary.omega),
            format!("adversary.period = {}", self.adversary.period),
        ];
        lines.extend([
            format!("adversary.seed = {}", self.adversary.seed),
            format!("adversary.file = {}", path(&self.adversary.file)),
            format!(
                "cover.mode = {}",
                match self.cover.mode {
                    CoverMode::Grid => "grid",
                    CoverMode::Random => "random",
                    CoverMode::Explicit => "explicit",
                }
            ),
            format!("cover.budget = {}", self.cover.budget),
            format!("cover.eps_prime = {}", self.cover.eps_prime),
            format!("cover.seed = {}", self.cover.seed),
            format!("cover.temperature = {}", opt(self.cover.temperature)),
            format!("cover.file = {}", path(&self.cover.file)),
            format!("algorithm = {}", self.algorithm),
            format!("glap.gamma = {}", opt(self.glap.gamma)),
            format!("glap.delta = {}", self.glap.delta),
            format!("glap.eps = {}", opt(self.glap.eps)),
            format!("glap.K = {}", self.glap.k),
            format!(
                "glap.preset = {}",
                match self.glap.preset {
                    PresetKind::Simulator => "simulator",
                    PresetKind::NoSimulator => "no_simulator",
                }
            ),
            format!("glap.bonus_log_pi = {}", self.glap.bonus_log_pi),
            format!(
                "features.source = {}",
                if self.features.source == FeatureSourceKind::Exact { "exact" } else { "estimated" }
            ),
            format!("features.budget = {}", self.features.budget),
            format!("features.warmup = {}", self.features.warmup),
            format!("features.floor = {}", opt(self.features.floor)),
            format!("features.perturb = {}", self.features.perturb),
            format!("features.redesign_every = {}", self.features.redesign_every),
            format!("features.file = {}", path(&self.features.file)),
            format!("mode = {}", self.mode),
            format!(
                "seeds = {}",
                self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("output.dir = {}", self.output_dir.display()),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}
