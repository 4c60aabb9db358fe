//! Run configuration: one TOML file with a section per stage. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::bilevel::TrainConfig;
use crate::data::synth::{ManifoldKind, ToySpec};
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, MiaConfig};
use crate::rvae::RvaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// IDX image/label pairs on disk.
    Idx,
    /// Generated two-class blob images.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub toy: ToySpec,
    /// Per-class sizes of the generated test split.
    pub toy_test_per_class: [usize; 2],
    /// Classes shrunk to `fraction` of the largest other class, in both splits.
    pub tail: Vec<u8>,
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Toy,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            toy: ToySpec::default(),
            toy_test_per_class: [600, 600],
            tail: Vec::new(),
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbors for the local-covariance curvature proxy.
    pub neighbors: usize,
    /// Leading eigenvalues treated as tangent directions.
    pub intrinsic_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            neighbors: 20,
            intrinsic_dim: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Analytic decoder to probe instead of a trained checkpoint.
    pub fixture: Option<ManifoldKind>,
    /// Grid points per axis over `[-extent, extent]^2` (2-D latents), or
    /// random latents for higher dimensions.
    pub grid: usize,
    pub extent: f64,
    pub eps: f64,
    pub trials: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            fixture: None,
            grid: 9,
            extent: 1.0,
            eps: 1e-3,
            trials: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub data: DataConfig,
    pub rvae: RvaeConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub attack: MiaConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("runs/default"),
            threads: 0,
            data: DataConfig::default(),
            rvae: RvaeConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            attack: MiaConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The top-level seed drives every stage.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.classifier.seed = self.seed;
        self.attack.seed = self.seed;
        self.baseline.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.baseline.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config(format!("data.fraction must be in (0, 1], got {}", self.data.fraction)));
        }
        if self.data.source == Source::Idx && (self.data.train_images.is_none() || self.data.train_labels.is_none()) {
            return Err(Error::Config("data.source = \"idx\" needs train_images and train_labels".into()));
        }
        if self.eval.neighbors < 2 {
            return Err(Error::Config("eval.neighbors must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["bogus = 1", "[train]\nepochs = 3", "[rvae]\nlatent = 2"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_reaches_every_stage() {
        let cfg = RunConfig::from_toml("seed = 7\n[train]\nepochs_mu = 3").unwrap();
        assert_eq!((cfg.train.seed, cfg.classifier.seed, cfg.train.epochs_mu), (7, 7, 3));
    }
}
