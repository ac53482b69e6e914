//! Thin command-line front end; the library does the work.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slotseed::commands::{
    self, ClusterAlgo, ClusterArgs, EvalArgs, SynthArgs, TrainArgs, TrainOverrides,
};
use slotseed::error::Error;
use slotseed::slotinit::{InitMethod, MappingVariant};

#[derive(Parser)]
#[command(name = "slotseed", version, about = "Clustering-conditioned slot initialization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled multi-sprite dataset.
    Synth(SynthCli),
    /// Train a reconstruction model on a dataset.
    Train(TrainCli),
    /// Evaluate a checkpoint and emit reports plus PPM visualizations.
    Eval(EvalCli),
    /// Run k-means or mean-shift on a tensor container.
    Cluster(ClusterCli),
    /// Verify every tape gradient against central differences.
    Gradcheck(GradcheckCli),
    /// Summarize one or more eval reports.
    Report(ReportCli),
}

#[derive(Args)]
struct SynthCli {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainCli {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Flag overrides beat config-file values.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<InitMethod>,
    #[arg(long)]
    mapping: Option<MappingVariant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ClusterCli {
    /// Tensor container: N x D features or an H x W x 3 image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = ["kmeans", "meanshift"])]
    algo: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckCli {
    /// Optional run config to validate first.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Internal fault-injection hook: corrupt the named op's gradient.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ReportCli {
    /// Eval report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnsupportedVariant(_) | Error::Capacity { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let manifest = commands::cmd_synth(&SynthArgs {
                out: args.out.clone(),
                count: args.count,
                size: args.size,
                min_objects: args.min_objects,
                max_objects: args.max_objects,
                seed: args.seed,
            })?;
            println!(
                "wrote {} scenes ({}x{}) to {}",
                manifest.scenes.len(),
                manifest.config.height,
                manifest.config.width,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let summary = commands::cmd_train(&TrainArgs {
                config: args.config,
                data: args.data,
                out: args.out.clone(),
                resume: args.resume,
                overrides: TrainOverrides {
                    steps: args.steps,
                    seed: args.seed,
                    method: args.method,
                    mapping: args.mapping,
                    k: args.k,
                    learning_rate: args.lr,
                    batch_size: args.batch_size,
                },
            })?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6} (sigma {:.4}, epsilon {:.4}){}",
                summary.steps_run,
                summary.first_loss,
                summary.final_loss,
                summary.sigma,
                summary.epsilon,
                if summary.interrupted {
                    " [interrupted, checkpoint saved]"
                } else {
                    ""
                }
            );
            println!("final checkpoint: {}", args.out.join("final").display());
        }
        Command::Eval(args) => {
            let report = commands::cmd_eval(&EvalArgs {
                checkpoint: args.checkpoint,
                data: args.data,
                out: args.out.clone(),
                iterations: args.iterations,
                seed: args.seed,
                limit: args.limit,
            })?;
            println!(
                "evaluated {} scenes at {} iterations: fg-ari {:.4}, psnr {:.2} dB, ssim {:.4}",
                report.scenes.len(),
                report.aggregate.iterations,
                report.aggregate.fg_ari,
                report.aggregate.psnr_db,
                report.aggregate.ssim
            );
            println!("report: {}", args.out.join("report.csv").display());
        }
        Command::Cluster(args) => {
            let algo = match args.algo.as_str() {
                "kmeans" => ClusterAlgo::Kmeans,
                _ => ClusterAlgo::Meanshift,
            };
            let (centers, points) = commands::cmd_cluster(&ClusterArgs {
                input: args.input,
                algo,
                k: args.k,
                sigma: args.sigma,
                epsilon: args.epsilon,
                out: args.out.clone(),
                seed: args.seed,
            })?;
            println!(
                "{} centers over {} points; outputs in {}",
                centers,
                points,
                args.out.display()
            );
        }
        Command::Gradcheck(args) => {
            let rows = commands::cmd_gradcheck(args.config.as_deref(), args.corrupt.as_deref())?;
            print!("{}", commands::format_check_rows(&rows));
            let failures: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failures.is_empty() {
                return Err(Error::NonFinite("gradient check failed"));
            }
            println!("all {} gradient checks passed", rows.len());
        }
        Command::Report(args) => {
            let table = commands::cmd_report(&args.reports)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
