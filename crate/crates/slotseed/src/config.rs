//! Flat JSON run configuration shared by training, evaluation, and the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::MeanShiftConfig;
use crate::error::{Error, Result};
use crate::slotinit::{
    cluster_count_for, validate_combination, ClusteringOptions, InitMethod, MappingVariant,
};

/// Every knob of a run. Unknown keys are rejected so typos fail loudly;
/// omitted keys take the defaults below. Flag overrides beat file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: InitMethod,
    pub mapping: MappingVariant,
    pub gaussian_output: bool,
    /// Slot count K (mean-shift discovers its own at run time).
    pub k: usize,
    /// Feature dimension D.
    pub d: usize,
    /// Square image side length.
    pub image_size: usize,
    /// Slot-attention iterations used in training.
    pub iterations_train: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Mean-shift bandwidth; None calibrates it on a probe batch.
    pub sigma: Option<f64>,
    /// Component merge radius; None uses sigma / 2.
    pub epsilon: Option<f64>,
    pub seed: u64,
    /// First encoder stage width.
    pub conv1_channels: usize,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    /// Mapping-network overrides; None keeps the per-variant defaults.
    pub mapping_hidden: Option<usize>,
    pub mapping_depth: Option<usize>,
    /// Backpropagate through at most this many trailing mean-shift
    /// iterations (0 means detach clustering entirely).
    pub backprop_iterations: usize,
    pub ms_initial_centers: usize,
    pub ms_max_iterations: usize,
    pub ms_fixed_point_tolerance: f64,
    pub kmeans_max_iterations: usize,
    pub kmeans_tolerance: f64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: InitMethod::Random,
            mapping: MappingVariant::SharedMlp,
            gaussian_output: false,
            k: 5,
            d: 32,
            image_size: 32,
            iterations_train: 3,
            learning_rate: 4e-4,
            warmup_steps: 500,
            decay_factor: 0.5,
            decay_interval: 5000,
            batch_size: 4,
            total_steps: 20_000,
            sigma: None,
            epsilon: None,
            seed: 0,
            conv1_channels: 16,
            decoder_hidden: 32,
            decoder_depth: 3,
            mapping_hidden: None,
            mapping_depth: None,
            backprop_iterations: 10,
            ms_initial_centers: 20,
            ms_max_iterations: 50,
            ms_fixed_point_tolerance: 1e-4,
            kmeans_max_iterations: 100,
            kmeans_tolerance: 1e-4,
            checkpoint_every: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_combination(self.method, self.mapping, self.gaussian_output)?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "feature dimension must be even and >= 2, got {}",
                self.d
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size {} is below the minimum of 8",
                self.image_size
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if let Some(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        if let Some(e) = self.epsilon {
            if e <= 0.0 {
                return Err(Error::Config(format!("epsilon must be positive, got {e}")));
            }
        }
        Ok(())
    }

    /// Cluster count M implied by the mapping (2K or K).
    pub fn cluster_count(&self) -> usize {
        cluster_count_for(self.mapping, self.k)
    }

    /// Clustering knobs with a resolved bandwidth.
    pub fn clustering_options(&self, sigma: f64, epsilon: f64) -> ClusteringOptions {
        ClusteringOptions {
            kmeans_max_iter: self.kmeans_max_iterations,
            kmeans_tolerance: self.kmeans_tolerance,
            meanshift: MeanShiftConfig {
                sigma,
                epsilon,
                initial_centers: self.ms_initial_centers,
                max_iterations: self.ms_max_iterations,
                fixed_point_tolerance: self.ms_fixed_point_tolerance,
            },
            backprop_iterations: Some(self.backprop_iterations),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"method": "kmeans", "mapping": "direct", "bogus_knob": 3}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn invalid_combination_rejected() {
        let cfg = RunConfig {
            method: InitMethod::Meanshift,
            mapping: MappingVariant::LargeMlp,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            method: InitMethod::Kmeans,
            mapping: MappingVariant::Direct,
            gaussian_output: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cluster_count_doubles_for_decoupled_mappings() {
        let cfg = RunConfig {
            method: InitMethod::Kmeans,
            mapping: MappingVariant::Pseudoweights,
            k: 5,
            ..Default::default()
        };
        assert_eq!(cfg.cluster_count(), 10);
        let cfg = RunConfig {
            mapping: MappingVariant::SharedMlp,
            ..cfg
        };
        assert_eq!(cfg.cluster_count(), 5);
    }

    #[test]
    fn json_round_trip_keeps_fields() {
        let cfg = RunConfig {
            method: InitMethod::Meanshift,
            mapping: MappingVariant::SharedMlp,
            k: 7,
            sigma: Some(0.4),
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
