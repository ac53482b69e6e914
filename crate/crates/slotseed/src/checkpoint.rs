//! Checkpoint directories: a JSON manifest plus one tensor container per
//! named parameter (and per Adam moment when training state is saved).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamState, LrSchedule};
use crate::scene::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Config echo; evaluation validates against it.
    pub config: RunConfig,
    /// Mapping variant tag, for quick inspection.
    pub variant: String,
    pub method: String,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    /// Bandwidth in effect (calibrated or configured).
    pub sigma: f64,
    pub epsilon: f64,
    pub step: u64,
    pub parameters: Vec<String>,
    pub has_optimizer: bool,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.sltc")
}

pub fn save(dir: &Path, model: &Model, step: u64, optimizer: Option<&AdamState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let named = model.collect();
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        variant: model.config.mapping.to_string(),
        method: model.config.method.to_string(),
        k: model.config.k,
        m: model.config.cluster_count(),
        d: model.config.d,
        sigma: model.sigma,
        epsilon: model.epsilon,
        step,
        parameters: named.iter().map(|(n, _)| n.clone()).collect(),
        has_optimizer: optimizer.is_some(),
    };
    for (name, tensor) in &named {
        write_tensor(&dir.join(tensor_file(name)), tensor)?;
    }
    if let Some(state) = optimizer {
        let (first, second) = state.moments();
        for ((name, _), (m, v)) in named.iter().zip(first.iter().zip(second)) {
            write_tensor(
                &dir.join(tensor_file(&format!("{name}.adam_m"))),
                &crate::tensor::Tensor::new(vec![m.len()], m.clone())?,
            )?;
            write_tensor(
                &dir.join(tensor_file(&format!("{name}.adam_v"))),
                &crate::tensor::Tensor::new(vec![v.len()], v.clone())?,
            )?;
        }
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Restores a model (and optionally its optimizer) from a checkpoint.
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest, Option<AdamState>)> {
    let manifest = read_manifest(dir)?;
    // Rebuild the architecture, then overwrite every parameter tensor.
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.config.seed);
    let mut model = Model::init(&mut rng, &manifest.config)?;
    model.sigma = manifest.sigma;
    model.epsilon = manifest.epsilon;
    {
        let named = model.collect_mut();
        if manifest.parameters.len() != named.len() {
            return Err(Error::Config(format!(
                "checkpoint lists {} parameters, architecture has {}",
                manifest.parameters.len(),
                named.len()
            )));
        }
        for (recorded, (name, tensor)) in manifest.parameters.iter().zip(named) {
            if recorded != &name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {recorded} does not match architecture {name}"
                )));
            }
            let loaded = read_tensor(&dir.join(tensor_file(&name)))?;
            if loaded.dims() != tensor.dims() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    loaded.dims(),
                    tensor.dims()
                )));
            }
            tensor.data_mut().copy_from_slice(loaded.data());
        }
    }
    let optimizer = if manifest.has_optimizer {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for name in &manifest.parameters {
            first.push(
                read_tensor(&dir.join(tensor_file(&format!("{name}.adam_m"))))?
                    .data()
                    .to_vec(),
            );
            second.push(
                read_tensor(&dir.join(tensor_file(&format!("{name}.adam_v"))))?
                    .data()
                    .to_vec(),
            );
        }
        let schedule = LrSchedule {
            base: manifest.config.learning_rate,
            warmup_steps: manifest.config.warmup_steps,
            decay_factor: manifest.config.decay_factor,
            decay_interval: manifest.config.decay_interval,
        };
        Some(AdamState::from_parts(manifest.step, first, second, schedule))
    } else {
        None
    };
    Ok((model, manifest, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::adam_step;
    use crate::slotinit::{InitMethod, MappingVariant};
    use rand::Rng;

    fn config() -> RunConfig {
        RunConfig {
            method: InitMethod::Kmeans,
            mapping: MappingVariant::Pseudoweights,
            k: 3,
            d: 8,
            image_size: 8,
            conv1_channels: 4,
            decoder_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn save_load_round_trips_parameters_bitwise() {
        let cfg = config();
        let model = Model::init(&mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 17, None).unwrap();
        let (loaded, manifest, opt) = load(dir.path()).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.m, 6);
        assert!(opt.is_none());
        for ((an, at), (bn, bt)) in model.collect().iter().zip(loaded.collect().iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "{an} drifted");
        }
    }

    #[test]
    fn optimizer_moments_restore_bitwise() {
        let cfg = config();
        let mut model = Model::init(&mut ChaCha8Rng::seed_from_u64(2), &cfg).unwrap();
        let sizes: Vec<usize> = model.collect().iter().map(|(_, t)| t.len()).collect();
        let schedule = LrSchedule {
            base: cfg.learning_rate,
            warmup_steps: cfg.warmup_steps,
            decay_factor: cfg.decay_factor,
            decay_interval: cfg.decay_interval,
        };
        let mut state = AdamState::new(&sizes, schedule);
        // A few noisy updates to fill the moments.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let grads: Vec<Vec<f64>> = sizes
                .iter()
                .map(|n| (0..*n).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut named = model.collect_mut();
            let mut params: Vec<&mut crate::tensor::Tensor> =
                named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, state.step_count(), Some(&state)).unwrap();
        let (_, manifest, restored) = load(dir.path()).unwrap();
        let restored = restored.unwrap();
        assert_eq!(restored.step_count(), 3);
        assert_eq!(manifest.step, 3);
        let (m0, v0) = state.moments();
        let (m1, v1) = restored.moments();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let cfg = config();
        let model = Model::init(&mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, 0, None).unwrap();
        // Corrupt the manifest to claim a different mapping.
        let path = dir.path().join("manifest.json");
        let mut manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        manifest.config.mapping = MappingVariant::Direct;
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
