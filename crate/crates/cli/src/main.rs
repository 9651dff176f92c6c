//! `dockvis` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dockvis::config::RunConfig;
use dockvis::pipeline::{self, PipelineError};
use dockvis::scene::SCHEMA_VERSION;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "dockvis", version, about = "Synthetic docking-station vision toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with a JSONL manifest.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the configured deformation to a dataset.
    Deform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the detector; writes checkpoint.json and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over a dataset; writes detections JSONL.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROC curve and AUC from a detections file.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the station pose from an image or a JSON centroid file.
    Pose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the pose for a JSON correspondence file `{intrinsics, points: [{P, p}]}`.
    Pnp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract landmark centroids from an image patch.
    Landmarks {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pose-solver noise sweep; writes a CSV with one row per noise level.
    BenchPnp {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    schema_version: u32,
}

fn default_out(cfg: &RunConfig, given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.output_dir.join(name))
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        }),
        _ => Ok(()),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, text + "\n").map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = RunConfig::load_with_overrides(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Gen { out } => {
            let dir = default_out(&cfg, out, "dataset");
            let m = pipeline::cmd_gen(&cfg, &dir)?;
            log::info!("wrote {} samples to {}", m.len(), dir.display());
        }
        Command::Deform { input, out } => {
            let dir = default_out(&cfg, out, "deformed");
            let m = pipeline::cmd_deform(&cfg, &input, &dir)?;
            log::info!("wrote {} deformed samples to {}", m.len(), dir.display());
        }
        Command::Train { data, out } => {
            let dir = default_out(&cfg, out, "train");
            let report = pipeline::cmd_train(&cfg, &data, &dir)?;
            log::info!("checkpoint {}", report.checkpoint.display());
        }
        Command::Detect { checkpoint, data, out } => {
            let path = default_out(&cfg, out, "detections.jsonl");
            ensure_parent(&path)?;
            let dets = pipeline::cmd_detect(&cfg, &checkpoint, &data, &path)?;
            log::info!("wrote {} detections to {}", dets.len(), path.display());
        }
        Command::Eval { detections, out } => {
            let dir = default_out(&cfg, out, "eval");
            let summary = pipeline::cmd_eval(&cfg, &detections, &dir)?;
            emit(&summary, None)?;
        }
        Command::Pose { input, out } => emit(&pipeline::cmd_pose(&cfg, &input)?, out.as_deref())?,
        Command::Pnp { input, out } => emit(&pipeline::cmd_pnp(&input)?, out.as_deref())?,
        Command::Landmarks { image, out } => emit(&pipeline::cmd_landmarks(&cfg, &image)?, out.as_deref())?,
        Command::BenchPnp { out } => {
            let path = default_out(&cfg, out, "bench_pnp.csv");
            ensure_parent(&path)?;
            let rows = pipeline::cmd_bench_pnp(&cfg, &path)?;
            for r in &rows {
                log::info!(
                    "sigma {} px: orientation {:.3} deg, position {:.2} mm, {} failures",
                    r.sigma_px,
                    r.mean_orientation_deg,
                    r.mean_position_mm,
                    r.failures
                );
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
                schema_version: SCHEMA_VERSION,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::FAILURE
        }
    }
}
