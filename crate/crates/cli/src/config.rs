//! The TOML run configuration and its command-line overrides.
//!
//! Precedence, highest first: command-line flags, the config file, the
//! `SELFTALK_DATA_DIR` environment variable (data directory only), built-in
//! defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selftalk::mesh_corpus::SynthConfig;
use selftalk::metrics::DEFAULT_MU;
use selftalk::{AnimatorConfig, LipReaderConfig, LossWeights, LveAggregation, MetricParams, TrainConfig};

pub const DATA_DIR_ENV: &str = "SELFTALK_DATA_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory written by `synth` and read by `train`.
    pub data_dir: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// LRP threshold in mesh units.
    pub mu: f64,
    pub lve_aggregation: LveAggregation,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            lve_aggregation: LveAggregation::Max,
        }
    }
}

impl MetricsConfig {
    pub fn params(&self) -> MetricParams {
        MetricParams {
            mu: self.mu,
            lve_aggregation: self.lve_aggregation,
        }
    }
}

/// Everything a run needs in one file.
///
/// `seed` feeds corpus synthesis, model initialization and shuffling;
/// `[metrics].mu` also drives the per-epoch validation LRP. Values given for
/// `train.seed` or `train.mu` are replaced by these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub animator: AnimatorConfig,
    pub lip_reader: LipReaderConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            animator: AnimatorConfig::default(),
            lip_reader: LipReaderConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub mu: Option<f64>,
    pub lve_aggregation: Option<LveAggregation>,
    pub epochs: Option<usize>,
    pub weights: Option<LossWeights>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// File (or defaults) plus overrides, with shared values propagated and
    /// everything validated.
    pub fn resolve(file: Option<&Path>, o: &Overrides, env_data_dir: Option<PathBuf>) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &o.out {
            cfg.paths.out_dir = Some(out.clone());
        }
        if let Some(d) = &o.data_dir {
            cfg.paths.data_dir = Some(d.clone());
        }
        if cfg.paths.data_dir.is_none() {
            cfg.paths.data_dir = env_data_dir;
        }
        if let Some(mu) = o.mu {
            cfg.metrics.mu = mu;
        }
        if let Some(agg) = o.lve_aggregation {
            cfg.metrics.lve_aggregation = agg;
        }
        if let Some(e) = o.epochs {
            cfg.train.epochs = e;
        }
        if let Some(w) = o.weights {
            cfg.train.weights = w;
        }
        cfg.train.seed = cfg.seed;
        cfg.train.mu = cfg.metrics.mu;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.lip_reader.validate()?;
        if !(self.metrics.mu.is_finite() && self.metrics.mu > 0.0) {
            bail!("metrics.mu must be positive, got {}", self.metrics.mu);
        }
        Ok(())
    }
}

/// Parses `rec,vel,lat,ctc`.
pub fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [rec, vel, lat, ctc] = parts[..] else {
        return Err(format!("expected four comma-separated weights, got {}", parts.len()));
    };
    let w = LossWeights { rec, vel, lat, ctc };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}
