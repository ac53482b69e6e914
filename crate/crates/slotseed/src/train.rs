//! Training loop: forward, MSE, backward, Adam, periodic checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::clustering::{calibrate_bandwidth, default_sigma_grid};
use crate::config::RunConfig;
use crate::datasynth::{load_scene, read_manifest, SceneSample};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::scene::{reconstruction_loss, Model};
use crate::slotinit::InitMethod;
use crate::tape::Tape;
use crate::tensor::Tensor;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn mark_interrupted(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Installs the Ctrl-C hook; the loop drains the flag and writes a final
/// checkpoint before returning.
pub fn install_interrupt_handler() {
    unsafe {
        libc::signal(libc::SIGINT, mark_interrupted as extern "C" fn(libc::c_int) as libc::sighandler_t);
    }
}

pub fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub interrupted: bool,
}

/// Deterministic per-(seed, step, sample) stream.
fn sample_rng(seed: u64, step: u64, sample: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0x517C_C1B7_2722_0A95))
        .wrapping_add(sample as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Calibrates the mean-shift bandwidth on encoder features of the first
/// few training scenes, honoring explicit config overrides.
pub fn resolve_bandwidth(model: &Model, scenes: &[SceneSample]) -> Result<(f64, f64)> {
    let cfg = &model.config;
    if let Some(sigma) = cfg.sigma {
        return Ok((sigma, cfg.epsilon.unwrap_or(sigma / 2.0)));
    }
    let probe_count = scenes.len().min(8);
    if probe_count == 0 {
        return Err(Error::Config("bandwidth calibration needs training scenes".into()));
    }
    let mut probes = Vec::with_capacity(probe_count);
    for scene in scenes.iter().take(probe_count) {
        let mut tape = Tape::new();
        let vals = model.register(&mut tape);
        let image = tape.constant(scene.image.dims().to_vec(), scene.image.data().to_vec());
        let grid = crate::scene::coordinate_grid(scene.image.dims()[0], scene.image.dims()[1]);
        let coords = tape.constant(grid.dims().to_vec(), grid.data().to_vec());
        let f = crate::scene::encode(&mut tape, &vals.encoder, image, coords, cfg.d)?;
        probes.push(tape.to_tensor(f));
    }
    let ms = model.config.clustering_options(1.0, 0.5).meanshift;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCA11_B0A7);
    let cal = calibrate_bandwidth(&probes, &ms, &default_sigma_grid(), &mut rng)?;
    Ok((cal.sigma, cfg.epsilon.unwrap_or(cal.epsilon)))
}

/// Trains from scratch or resumes; writes `train_log.csv` plus periodic
/// and final checkpoints under `out_dir`.
pub fn run_training(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    let manifest = read_manifest(data_dir)?;
    if manifest.scenes.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let scenes: Vec<SceneSample> = manifest
        .scenes
        .iter()
        .map(|e| load_scene(data_dir, e))
        .collect::<Result<_>>()?;

    let (mut model, mut state, start_step) = match resume {
        Some(ckpt) => {
            let (model, manifest, opt) = checkpoint::load(ckpt)?;
            // Run-length knobs may grow on resume; the architecture may not.
            let normalize = |c: &RunConfig| RunConfig {
                total_steps: 0,
                checkpoint_every: 0,
                ..c.clone()
            };
            if normalize(&manifest.config) != normalize(config) {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            let step = manifest.step;
            let state = opt.ok_or_else(|| {
                Error::Config("checkpoint has no optimizer state to resume from".into())
            })?;
            (model, state, step)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut model = Model::init(&mut rng, config)?;
            if config.method == InitMethod::Meanshift {
                let (sigma, epsilon) = resolve_bandwidth(&model, &scenes)?;
                model.sigma = sigma;
                model.epsilon = epsilon;
            }
            let sizes: Vec<usize> = model.collect().iter().map(|(_, t)| t.len()).collect();
            let schedule = LrSchedule {
                base: config.learning_rate,
                warmup_steps: config.warmup_steps,
                decay_factor: config.decay_factor,
                decay_interval: config.decay_interval,
            };
            (model, AdamState::new(&sizes, schedule), 0)
        }
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = if start_step == 0 {
        let mut f = fs::File::create(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        writeln!(f, "step,loss,lr").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        f
    } else {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?
    };

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut was_interrupted = false;
    let mut steps_run = start_step;
    for step in start_step + 1..=config.total_steps {
        let mut grads: Vec<Vec<f64>> = model
            .collect()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        let mut batch_loss = 0.0;
        for b in 0..config.batch_size {
            let scene_idx =
                ((step - 1) as usize * config.batch_size + b) % scenes.len();
            let scene = &scenes[scene_idx];
            let mut tape = Tape::new();
            let vals = model.register(&mut tape);
            let mut rng = sample_rng(config.seed, step, b);
            let built = model.build_forward(
                &mut tape,
                &vals,
                &scene.image,
                config.iterations_train,
                &mut rng,
                None,
            )?;
            let n = scene.image.dims()[0] * scene.image.dims()[1];
            let target = tape.constant(vec![n, 3], scene.image.data().to_vec());
            let loss = reconstruction_loss(&mut tape, built.reconstruction, target)?;
            batch_loss += tape.data(loss)[0];
            tape.backward(loss)?;
            for (acc, val) in grads.iter_mut().zip(&vals.ordered) {
                if let Some(g) = tape.grad(*val) {
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
        }
        let scale = 1.0 / config.batch_size as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        {
            let mut named = model.collect_mut();
            let mut params: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut params, &grads, &mut state)?;
        }
        steps_run = step;
        if first_loss.is_nan() {
            first_loss = batch_loss;
        }
        final_loss = batch_loss;
        if step % 50 == 0 || step == 1 {
            let lr = state.schedule().rate_at(step);
            writeln!(log, "{step},{batch_loss},{lr}")
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        if config.checkpoint_every > 0
            && step % config.checkpoint_every == 0
            && step != config.total_steps
        {
            checkpoint::save(&out_dir.join(format!("step_{step:07}")), &model, step, Some(&state))?;
        }
        if interrupted() {
            was_interrupted = true;
            break;
        }
    }
    checkpoint::save(&out_dir.join("final"), &model, steps_run, Some(&state))?;
    Ok(TrainSummary {
        steps_run,
        first_loss,
        final_loss,
        sigma: model.sigma,
        epsilon: model.epsilon,
        interrupted: was_interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate_dataset, SynthConfig};
    use crate::slotinit::MappingVariant;

    fn tiny_config(method: InitMethod, mapping: MappingVariant, steps: u64, seed: u64) -> RunConfig {
        RunConfig {
            method,
            mapping,
            k: 3,
            d: 8,
            image_size: 16,
            iterations_train: 2,
            learning_rate: 1e-3,
            warmup_steps: 10,
            batch_size: 2,
            total_steps: steps,
            seed,
            conv1_channels: 4,
            decoder_hidden: 16,
            checkpoint_every: 0,
            ms_initial_centers: 12,
            ..Default::default()
        }
    }

    fn tiny_dataset(dir: &Path) {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            min_objects: 1,
            max_objects: 2,
            ..Default::default()
        };
        generate_dataset(5, &cfg, 6, dir).unwrap();
    }

    #[test]
    fn loss_descends_on_smoke_run() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let mut successes = 0;
        for seed in 0..5 {
            let out = tempfile::tempdir().unwrap();
            let cfg = tiny_config(InitMethod::Random, MappingVariant::SharedMlp, 200, seed);
            let summary = run_training(&cfg, data.path(), out.path(), None).unwrap();
            if summary.final_loss < summary.first_loss {
                successes += 1;
            }
        }
        assert!(successes >= 4, "loss decreased for only {successes}/5 seeds");
    }

    #[test]
    fn resume_restores_step_and_moments_bitwise() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let cfg = tiny_config(InitMethod::Kmeans, MappingVariant::Direct, 6, 3);
        // Uninterrupted reference run.
        let out_full = tempfile::tempdir().unwrap();
        run_training(&cfg, data.path(), out_full.path(), None).unwrap();
        // Stop at 3 steps, then resume to 6.
        let cfg_half = RunConfig { total_steps: 3, ..cfg.clone() };
        let out_half = tempfile::tempdir().unwrap();
        run_training(&cfg_half, data.path(), out_half.path(), None).unwrap();
        let out_resumed = tempfile::tempdir().unwrap();
        run_training(
            &cfg,
            data.path(),
            out_resumed.path(),
            Some(&out_half.path().join("final")),
        )
        .unwrap();
        let (full, full_manifest, full_opt) = checkpoint::load(&out_full.path().join("final")).unwrap();
        let (resumed, res_manifest, res_opt) =
            checkpoint::load(&out_resumed.path().join("final")).unwrap();
        assert_eq!(full_manifest.step, 6);
        assert_eq!(res_manifest.step, 6);
        for ((an, at), (_, bt)) in full.collect().iter().zip(resumed.collect().iter()) {
            assert_eq!(at.data(), bt.data(), "{an} differs after resume");
        }
        let full_state = full_opt.unwrap();
        let (m0, v0) = full_state.moments();
        let restored = res_opt.unwrap();
        let (m1, v1) = restored.moments();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn log_has_schedule_column() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_config(InitMethod::Random, MappingVariant::SharedMlp, 2, 0);
        run_training(&cfg, data.path(), out.path(), None).unwrap();
        let log = fs::read_to_string(out.path().join("train_log.csv")).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next().unwrap(), "step,loss,lr");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "1");
        let lr: f64 = first[2].parse().unwrap();
        assert!((lr - 1e-3 / 10.0).abs() < 1e-12);
    }
}
