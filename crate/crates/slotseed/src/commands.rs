//! Implementations behind the CLI subcommands. The binary stays thin:
//! flag parsing there, behavior here.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::checks::{run_gradient_checks, CheckRow};
use crate::clustering::{kmeans_run, meanshift_run, MeanShiftConfig};
use crate::config::RunConfig;
use crate::container::{read_container, write_tensor, ContainerTensor};
use crate::datasynth::{generate_dataset, load_scene, read_manifest, DatasetManifest, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{foreground_ari, psnr, ssim, EvalReport, SceneScore};
use crate::ppm;
use crate::scene::segment;
use crate::tensor::Tensor;
use crate::train::{run_training, TrainSummary};

/// Worker cap: SLOTSEED_THREADS, else available parallelism (max 8).
pub fn thread_cap() -> usize {
    std::env::var("SLOTSEED_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get().min(8))
                .unwrap_or(1)
        })
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetManifest> {
    let cfg = SynthConfig {
        height: args.size,
        width: args.size,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        ..Default::default()
    };
    generate_dataset(args.seed, &cfg, args.count, &args.out)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub overrides: TrainOverrides,
}

#[derive(Default)]
pub struct TrainOverrides {
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub method: Option<crate::slotinit::InitMethod>,
    pub mapping: Option<crate::slotinit::MappingVariant>,
    pub k: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut config = RunConfig::load(&args.config)?;
    let o = &args.overrides;
    if let Some(v) = o.steps {
        config.total_steps = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.method {
        config.method = v;
    }
    if let Some(v) = o.mapping {
        config.mapping = v;
    }
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    config.validate()?;
    crate::train::install_interrupt_handler();
    run_training(&config, &args.data, &args.out, args.resume.as_deref())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub iterations: usize,
    pub seed: u64,
    pub limit: Option<usize>,
}

fn eval_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(scene as u64)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (model, _manifest, _) = checkpoint::load(&args.checkpoint)?;
    let dataset = read_manifest(&args.data)?;
    let count = args
        .limit
        .map(|l| l.min(dataset.scenes.len()))
        .unwrap_or(dataset.scenes.len());
    if count == 0 {
        return Err(Error::Config("no scenes to evaluate".into()));
    }
    let image_dir = args.out.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(image_dir.display().to_string(), e))?;

    let scores: Mutex<Vec<Option<SceneScore>>> = Mutex::new(vec![None; count]);
    let next: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let workers = thread_cap().min(count);
    let result: Result<()> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            let model = &model;
            let dataset = &dataset;
            let scores = &scores;
            let next = &next;
            let image_dir = &image_dir;
            handles.push(scope.spawn(move || -> Result<()> {
                loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= count {
                        return Ok(());
                    }
                    let scene = load_scene(&args.data, &dataset.scenes[idx])?;
                    let out = model.forward(
                        &scene.image,
                        args.iterations,
                        eval_seed(args.seed, idx),
                    )?;
                    let pred = segment(&out.masks)?;
                    let ari = foreground_ari(&pred, &scene.labels)?;
                    let score = SceneScore {
                        scene: idx,
                        fg_ari: ari.value,
                        psnr_db: psnr(&out.reconstruction, &scene.image)?,
                        ssim: ssim(&out.reconstruction, &scene.image)?,
                        discovered_k: out.diagnostics.discovered_k,
                        iterations: args.iterations,
                    };
                    ppm::write_rgb(
                        &image_dir.join(format!("scene_{idx:04}_recon.ppm")),
                        &out.reconstruction,
                    )?;
                    let (h, w) = (scene.image.dims()[0], scene.image.dims()[1]);
                    ppm::write_labels(
                        &image_dir.join(format!("scene_{idx:04}_segments.ppm")),
                        &pred,
                        h,
                        w,
                    )?;
                    let k = out.masks.dims()[0];
                    for slot in 0..k {
                        let mask = Tensor::new(
                            vec![h, w],
                            out.masks.data()[slot * h * w..(slot + 1) * h * w].to_vec(),
                        )?;
                        ppm::write_gray(
                            &image_dir.join(format!("scene_{idx:04}_mask_{slot}.ppm")),
                            &mask,
                        )?;
                    }
                    scores.lock().unwrap()[idx] = Some(score);
                }
            }));
        }
        for h in handles {
            h.join().expect("eval worker panicked")?;
        }
        Ok(())
    });
    result?;
    let scenes: Vec<SceneScore> = scores
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every scene scored"))
        .collect();
    let report = EvalReport::from_scenes(scenes, args.iterations);
    let csv_path = args.out.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let json_path = args.out.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterAlgo {
    Kmeans,
    Meanshift,
}

pub struct ClusterArgs {
    pub input: PathBuf,
    pub algo: ClusterAlgo,
    pub k: Option<usize>,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub out: PathBuf,
    pub seed: u64,
}

/// Clusters a container file: either an N x D feature grid or an
/// H x W x 3 image whose pixels become rgb feature rows.
pub fn cmd_cluster(args: &ClusterArgs) -> Result<(usize, usize)> {
    let raw = read_container(&args.input)?;
    let tensor = raw.to_tensor()?;
    let (features, image_hw) = match tensor.dims() {
        [_, _] => (tensor.clone(), None),
        [h, w, 3] => {
            let n = h * w;
            (
                Tensor::new(vec![n, 3], tensor.data().to_vec())?,
                Some((*h, *w)),
            )
        }
        other => {
            return Err(Error::Shape {
                op: "cluster",
                lhs: format!("{other:?}"),
                rhs: "N x D features or H x W x 3 image required".into(),
            })
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (centers, membership) = match args.algo {
        ClusterAlgo::Kmeans => {
            let k = args
                .k
                .ok_or_else(|| Error::Config("kmeans clustering needs --k".into()))?;
            let cs = kmeans_run(&features, k, &mut rng, 100, 1e-6)?;
            (cs.centers, cs.assignments)
        }
        ClusterAlgo::Meanshift => {
            let sigma = args.sigma.unwrap_or(1.0);
            let cfg = MeanShiftConfig {
                sigma,
                epsilon: args.epsilon.unwrap_or(sigma / 2.0),
                initial_centers: 20.min(features.rows()),
                ..Default::default()
            };
            let cs = meanshift_run(&features, &cfg, &mut rng)?;
            // Nearest-center membership for visualization.
            let membership: Vec<usize> = (0..features.rows())
                .map(|p| {
                    (0..cs.centers.rows())
                        .min_by(|a, b| {
                            crate::tensor::sq_dist(features.row(p), cs.centers.row(*a))
                                .total_cmp(&crate::tensor::sq_dist(
                                    features.row(p),
                                    cs.centers.row(*b),
                                ))
                        })
                        .unwrap_or(0)
                })
                .collect();
            (cs.centers, membership)
        }
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write_tensor(&args.out.join("centers.sltc"), &centers)?;
    let membership_t = ContainerTensor::from_u8(
        vec![membership.len()],
        membership.iter().map(|m| *m as u8).collect(),
    );
    crate::container::write_container(&args.out.join("membership.sltc"), &membership_t)?;
    let (h, w) = image_hw.unwrap_or((1, membership.len()));
    ppm::write_labels(&args.out.join("assignments.ppm"), &membership, h, w)?;
    Ok((centers.rows(), membership.len()))
}

/// Runs the gradient table; Ok(rows) even when rows fail, so the caller
/// can print before exiting nonzero.
pub fn cmd_gradcheck(config: Option<&Path>, corrupt: Option<&str>) -> Result<Vec<CheckRow>> {
    if let Some(path) = config {
        RunConfig::load(path)?;
    }
    run_gradient_checks(corrupt)
}

/// Loads eval reports and formats one aggregate line each.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::from("report,scenes,fg_ari,psnr_db,ssim,mean_k,iterations\n");
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: EvalReport = serde_json::from_slice(&bytes)?;
        out.push_str(&format!(
            "{},{},{:.4},{:.2},{:.4},{:.2},{}\n",
            path.display(),
            report.scenes.len(),
            report.aggregate.fg_ari,
            report.aggregate.psnr_db,
            report.aggregate.ssim,
            report.aggregate.mean_discovered_k,
            report.aggregate.iterations
        ));
    }
    Ok(out)
}

/// Renders the gradcheck table for terminal output.
pub fn format_check_rows(rows: &[CheckRow]) -> String {
    let mut out = String::from("op                        max_rel_err   threshold  status\n");
    for row in rows {
        let status = if row.passed {
            "pass"
        } else if row.kink_excluded {
            "fail (kink-adjacent)"
        } else {
            "fail"
        };
        out.push_str(&format!(
            "{:<25} {:>12.3e} {:>11.0e}  {}\n",
            row.name, row.max_rel_err, row.threshold, status
        ));
    }
    out
}
