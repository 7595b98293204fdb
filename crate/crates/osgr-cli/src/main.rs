//! `osgr`: open-set gait recognition from radar point clouds, end to end —
//! synthesize or convert recordings, train, calibrate the novelty
//! threshold, evaluate the openness sweep, and run live detection.
//!
//! Every command logs the resolved config plus its digest, and artifacts
//! that must agree (checkpoint, detector, config) carry digests that are
//! checked before use.  Exit code 0 means every requested artifact was
//! produced.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    /// Artifacts that must describe the same run don't.
    #[error("{0}")]
    Mismatch(String),
    #[error("cannot access {path}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] osgr::data::DataError),
    #[error(transparent)]
    Train(#[from] osgr::train::TrainError),
    #[error(transparent)]
    Detect(#[from] osgr::detect::DetectError),
    #[error(transparent)]
    Eval(#[from] osgr::eval::EvalError),
    #[error(transparent)]
    Prior(#[from] osgr::prior::PriorError),
    #[error("cannot encode artifact as JSON")]
    Encode(#[from] serde_json::Error),
}

#[derive(Parser)]
#[command(
    name = "osgr",
    version,
    about = "Open-set gait recognition from sparse radar point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the pipeline commands.  Anything set here replaces
/// the config-file value before the resolved config is digested, so the
/// logged digest always reflects what actually ran.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Replace the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Evidence lengths to sweep, comma separated (e.g. --k 1,3,5)
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Evaluated unknown subjects per trial (calibration subject is extra)
    #[arg(long)]
    unknown_count: Option<usize>,
    /// Number of repeated trials with fresh partitions
    #[arg(long)]
    trials: Option<usize>,
    /// Split each subject's windows into contiguous time chunks instead of randomly
    #[arg(long)]
    split_by_chunk: bool,
    /// Points per frame after resampling
    #[arg(long)]
    points: Option<usize>,
    /// Restrict evaluation windows to one modality: 0, 1, 2, a name, or "all"
    #[arg(long)]
    modality: Option<String>,
    /// Architecture ablation: v1, v2, v3, or none
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic radar recordings for every subject and modality
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's recordings_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a CSV point-cloud export to the binary recording format
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Subject id to stamp into the recording
        #[arg(long)]
        subject: u32,
        /// Walking modality: 0, 1, 2, or a name
        #[arg(long)]
        modality: String,
        /// Frames per second of the source capture
        #[arg(long, default_value_t = 10.0)]
        frame_rate: f32,
    },
    /// Train a model on the known subjects of the configured partition
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Directory for checkpoint, training curve, and resolved config
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Calibrate the novelty threshold for a trained checkpoint
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs/checkpoint.ckpt")]
        checkpoint: PathBuf,
        /// Directory for detector.json
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate open-set recognition for each evidence length k
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs/checkpoint.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/detector.json")]
        detector: PathBuf,
        /// Directory for report.json, plot.csv, and confusion matrices
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Classify one recording as a known subject or an unknown walker
    Detect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/checkpoint.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/detector.json")]
        detector: PathBuf,
        /// Binary recording to identify
        #[arg(long)]
        recording: PathBuf,
        /// Consecutive windows of evidence to vote over
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Run the full multi-trial pipeline and aggregate macro-F1 by k
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Directory for report.json and plot.csv
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Run trials one at a time for bit-reproducible scheduling
        #[arg(long)]
        deterministic: bool,
    },
}

/// Load the config file and fold command-line overrides into it.
fn load_config(path: &PathBuf, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    commands::apply_overrides(
        &mut cfg,
        ov.seed,
        ov.k.clone(),
        ov.unknown_count,
        ov.trials,
        ov.split_by_chunk,
        ov.points,
        ov.modality.clone(),
        ov.ablation.clone(),
    )?;
    Ok(cfg)
}

/// Worker-thread cap for `experiment`: `--deterministic` forces 1,
/// otherwise the OSGR_THREADS environment variable applies, otherwise
/// one thread per trial.
fn max_parallel(deterministic: bool) -> Result<Option<usize>, CliError> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var("OSGR_THREADS") {
        Ok(v) => {
            let n = v
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    CliError::Invalid(format!(
                        "OSGR_THREADS must be a positive integer, got {v:?}"
                    ))
                })?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth { config, seed, out } => {
            let ov = Overrides { seed, ..Overrides::default() };
            let cfg = load_config(&config, &ov)?;
            let out = out.unwrap_or_else(|| cfg.data.recordings_dir.clone());
            commands::cmd_gen_synth(&cfg, &out)
        }
        Command::Convert { input, output, subject, modality, frame_rate } => {
            commands::cmd_convert(&input, &output, subject, &modality, frame_rate)
        }
        Command::Train { config, overrides, out } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_train(&cfg, &out).map(|_| ())
        }
        Command::Calibrate { config, overrides, checkpoint, out } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_calibrate(&cfg, &checkpoint, &out).map(|_| ())
        }
        Command::Eval { config, overrides, checkpoint, detector, out } => {
            let cfg = load_config(&config, &overrides)?;
            let k = cfg.eval.k.clone();
            commands::cmd_eval(&cfg, &checkpoint, &detector, &k, &out)
        }
        Command::Detect { config, checkpoint, detector, recording, k } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_detect(&cfg, &checkpoint, &detector, &recording, k)
        }
        Command::Experiment { config, overrides, out, deterministic } => {
            let cfg = load_config(&config, &overrides)?;
            let workers = max_parallel(deterministic)?;
            commands::cmd_experiment(&cfg, &out, workers)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
