//! Experiment configuration: TOML-backed, diff-friendly, with unknown keys
//! rejected. One file describes the dataset, the training run, the sampler,
//! and the evaluation parameters; a single top-level seed feeds every
//! substream.

use crate::error::{Error, Result};
use crate::mixture::LabeledMixture;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Checkerboard grid-of-Gaussians dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub std: f64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            rows: 5,
            cols: 5,
            spacing: 2.0,
            std: 0.15,
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<LabeledMixture> {
        LabeledMixture::grid_two_class(self.rows, self.cols, self.spacing, self.std)
    }

    pub fn num_classes(&self) -> usize {
        if self.rows * self.cols > 1 {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddpm,
    FlowEuler,
    FlowEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    None,
    Cfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub noise_scale: f64,
    pub guidance: GuidanceMode,
    pub w_infer: f64,
}

impl Default for SamplerConfig {
    fn default() -> SamplerConfig {
        SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 1000,
            noise_scale: 0.5,
            guidance: GuidanceMode::None,
            w_infer: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    /// Sigma multiplier for the outlier-fraction metric.
    pub outlier_k: f64,
    /// Radius multiplier for mode recall.
    pub recall_r: f64,
    /// KDE grid resolution per axis.
    pub kde_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            samples: 2000,
            outlier_k: 3.0,
            recall_r: 3.0,
            kde_bins: 64,
        }
    }
}

/// The full experiment description. The top-level `seed` is authoritative and
/// is copied into the training section on `normalize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Propagate the top-level seed and the dataset's class count into the
    /// training section, then validate everything.
    pub fn normalize(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.train.arch.num_classes = self.dataset.num_classes();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.rows < 1 || self.dataset.cols < 1 {
            return Err(Error::Config("dataset grid needs at least one cell".into()));
        }
        if !(self.dataset.spacing > 0.0) {
            return Err(Error::Config(format!(
                "grid spacing must be positive, got {}",
                self.dataset.spacing
            )));
        }
        if !(self.dataset.std > 0.0) {
            return Err(Error::Config(format!(
                "mode std must be positive, got {}",
                self.dataset.std
            )));
        }
        self.train.validate()?;
        if self.sampler.steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.sampler.kind == SamplerKind::Ddpm && self.sampler.steps != self.train.t_steps {
            return Err(Error::Config(format!(
                "ancestral sampling runs the full chain: sampler.steps ({}) must equal \
                 train.t_steps ({})",
                self.sampler.steps, self.train.t_steps
            )));
        }
        if self.sampler.noise_scale < 0.0 {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        if self.sampler.w_infer < 0.0 {
            return Err(Error::Config(
                "inference guidance weight must be nonnegative".into(),
            ));
        }
        if self.eval.samples < 1 {
            return Err(Error::Config("evaluation needs at least one sample".into()));
        }
        if !(self.eval.outlier_k > 0.0) || !(self.eval.recall_r > 0.0) {
            return Err(Error::Config("metric radii must be positive".into()));
        }
        if self.eval.kde_bins < 2 {
            return Err(Error::Config(
                "KDE grid needs at least 2 bins per axis".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.normalize()?;
        Ok(cfg)
    }

    /// Write the effective configuration; reloading it reproduces `self`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Objective;
    use tempfile::tempdir;

    #[test]
    fn default_config_is_valid() {
        let mut cfg = ExperimentConfig::default();
        cfg.normalize().unwrap();
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let mut cfg = ExperimentConfig {
            seed: 1234,
            ..ExperimentConfig::default()
        };
        cfg.train.objective = Objective::Mg;
        cfg.train.w = 0.75;
        cfg.normalize().unwrap();
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 1\nwibble = true\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn normalize_propagates_seed_and_classes() {
        let mut cfg = ExperimentConfig {
            seed: 99,
            dataset: DatasetConfig {
                rows: 1,
                cols: 1,
                ..DatasetConfig::default()
            },
            ..ExperimentConfig::default()
        };
        cfg.normalize().unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.train.arch.num_classes, 1);
    }

    #[test]
    fn ddpm_steps_must_match_chain_length() {
        let mut cfg = ExperimentConfig::default();
        cfg.sampler.steps = 250;
        assert!(cfg.normalize().is_err());
        cfg.sampler.kind = SamplerKind::FlowEm;
        cfg.normalize().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "seed = 7\n\n[dataset]\nrows = 2\ncols = 2\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.rows, 2);
        assert_eq!(cfg.dataset.spacing, 2.0);
        assert_eq!(cfg.train.batch_size, 256);
    }
}
