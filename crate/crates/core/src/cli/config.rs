//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ablate::{ALLOWED_FRACTIONS, DEFAULT_EPISODES_PER_MASK, DEFAULT_STRIDE};
use crate::ddpg::TrainConfig;
use crate::embed::EmbedMethod;
use crate::env::EnvId;
use crate::error::{config_err, Error, Result};

/// Which evaluation episodes of a sweep are written to disk as full traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TracePolicy {
    /// Every episode of every mask.
    All,
    /// The first episode of every mask.
    First,
    /// Baseline episodes only.
    Baseline,
    None,
}

impl TracePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            TracePolicy::All => "all",
            TracePolicy::First => "first",
            TracePolicy::Baseline => "baseline",
            TracePolicy::None => "none",
        }
    }

    /// Whether episode `episode` of a mask (or the baseline) is persisted.
    pub fn keeps(self, baseline: bool, episode: usize) -> bool {
        match self {
            TracePolicy::All => true,
            TracePolicy::First => episode == 0,
            TracePolicy::Baseline => baseline,
            TracePolicy::None => false,
        }
    }
}

impl fmt::Display for TracePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TracePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TracePolicy::All),
            "first" => Ok(TracePolicy::First),
            "baseline" => Ok(TracePolicy::Baseline),
            "none" => Ok(TracePolicy::None),
            other => config_err(format!("unknown trace policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub layers: Vec<usize>,
    /// Empty means a baseline-only sweep.
    pub fractions: Vec<f64>,
    pub stride: usize,
    pub episodes: usize,
    pub seed: u64,
    pub traces: TracePolicy,
    /// Worker threads; `ABLSCOPE_THREADS` caps this.
    pub threads: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            layers: vec![1, 2],
            fractions: ALLOWED_FRACTIONS.to_vec(),
            stride: DEFAULT_STRIDE,
            episodes: DEFAULT_EPISODES_PER_MASK,
            seed: 0,
            traces: TracePolicy::First,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub method: EmbedMethod,
    pub layer: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub seed: u64,
    pub null_shuffles: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            method: EmbedMethod::Pca,
            layer: 1,
            n_neighbors: 15,
            min_dist: 0.1,
            seed: 0,
            null_shuffles: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    pub envs: Vec<EnvId>,
    pub seeds: Vec<u64>,
    /// Per-environment training length overriding `train.total_steps`.
    pub steps: BTreeMap<EnvId, u64>,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            envs: EnvId::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            steps: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub embed: EmbedConfig,
    pub repro: ReproConfig,
}

/// 1-based line and column of a byte offset.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
            Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_owned(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ablate.layers.iter().any(|&l| l != 1 && l != 2) {
            return config_err("ablate.layers may only contain 1 and 2");
        }
        for &p in &self.ablate.fractions {
            crate::ablate::canonical_fraction(p)?;
        }
        if self.ablate.stride == 0 || self.ablate.episodes == 0 {
            return config_err("ablate.stride and ablate.episodes must be positive");
        }
        if self.embed.layer != 1 && self.embed.layer != 2 {
            return config_err("embed.layer must be 1 or 2");
        }
        if self.repro.seeds.is_empty() {
            return config_err("repro.seeds must not be empty");
        }
        Ok(())
    }

    /// The defaults rendered as TOML.
    pub fn defaults_toml() -> String {
        toml::to_string(&RunConfig::default()).expect("default config serializes")
    }
}

/// Worker count: the requested value (or the machine's parallelism), capped
/// by `ABLSCOPE_THREADS` when set.
pub fn worker_threads(requested: Option<usize>) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("ABLSCOPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = requested.unwrap_or(available).max(1);
    cap.map_or(n, |c| n.min(c))
}
