//! Command-line surface: argument definitions and dispatch.

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use luminav_core::metrics::AlignmentMode;
use std::path::PathBuf;

/// Confidence-aware visual localization for endoluminal navigation.
#[derive(Debug, Parser)]
#[command(name = "luminav", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a branching-lumen dataset: frames, depths, scene-coordinate
    /// maps, descriptors, ground truth, and the virtual database.
    Simulate(SimulateArgs),
    /// Run retrieval and the confidence-gated localization loop over a
    /// dataset directory.
    Localize(LocalizeArgs),
    /// Compare an estimated trajectory against a reference (TUM format) and
    /// report translational ATE and rotational RPE.
    Evaluate(EvaluateArgs),
    /// Inspect the retrieval stage: per-position hit scores and the selected
    /// virtual-buffer window.
    Retrieve(RetrieveArgs),
    /// Measure per-stage localization latency over synthetic frames.
    Bench(BenchArgs),
}

/// Configuration flags shared by every subcommand that runs the engine.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root random seed (shorthand for --set seed=N, applied last).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Print the effective configuration (every key) before running.
    #[arg(long)]
    pub print_config: bool,
}

impl ConfigArgs {
    /// Defaults, then the config file, then --set overrides, then --seed.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.load_file(path)?;
        }
        config.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.print_config {
            print!("{}", config.render());
        }
        Ok(config)
    }
}

/// Alignment applied to the estimate before the translational error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    /// Compare poses in the frame they were estimated in.
    None,
    /// Closed-form similarity (scale + rotation + translation) alignment.
    #[value(name = "7dof")]
    SevenDof,
}

impl From<AlignArg> for AlignmentMode {
    fn from(arg: AlignArg) -> Self {
        match arg {
            AlignArg::None => AlignmentMode::None,
            AlignArg::SevenDof => AlignmentMode::SevenDoF,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory produced by `simulate`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Output directory for trajectory, logs, and the run summary.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Alignment for the inline evaluation against ground truth.
    #[arg(long, value_enum, default_value = "none")]
    pub align: AlignArg,
    /// Run retrains on a background thread while frames keep flowing
    /// (wall-clock dependent; estimates made during a retrain skip
    /// refinement and carry no gate verdict).
    #[arg(long)]
    pub parallel_refine: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long, value_name = "FILE")]
    pub est: PathBuf,
    /// Reference trajectory (TUM format); frames match by timestamp.
    #[arg(long = "ref", value_name = "FILE")]
    pub reference: PathBuf,
    /// Alignment applied to the estimate before the translational error.
    #[arg(long, value_enum, default_value = "none")]
    pub align: AlignArg,
    /// Frame step for the relative rotation error.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub delta: usize,
    /// Restrict the translational error to this fraction of frames, keeping
    /// the highest inlier counts (requires per-frame counts; incompatible
    /// with --align 7dof).
    #[arg(long, value_name = "FRACTION")]
    pub keep: Option<f64>,
    /// Per-frame record file supplying inlier counts for --keep
    /// [default: frames.jsonl next to the estimate].
    #[arg(long, value_name = "FILE")]
    pub counts: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long, value_name = "FILE", default_value = "evaluation_report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory produced by `simulate`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Window parameter: the buffer spans range+1 database entries
    /// [default: retrieval.range from the config].
    #[arg(long, value_name = "N")]
    pub range: Option<usize>,
    /// First query frame index.
    #[arg(long, default_value_t = 0, value_name = "INDEX")]
    pub query_start: usize,
    /// Number of query frames [default: all from query-start on].
    #[arg(long, value_name = "N")]
    pub query_count: Option<usize>,
    /// Emit machine-readable JSON instead of the histogram.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of frames to measure.
    #[arg(long, default_value_t = 500, value_name = "N")]
    pub frames: usize,
    /// Scene-coordinate grid stride in pixels (4 on the default camera gives
    /// an 80x60 grid).
    #[arg(long, default_value_t = 4, value_name = "PX")]
    pub stride: u32,
    /// Emit machine-readable JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => commands::simulate::run(&args),
        Command::Localize(args) => commands::localize::run(&args),
        Command::Evaluate(args) => commands::evaluate::run(&args),
        Command::Retrieve(args) => commands::retrieve::run(&args),
        Command::Bench(args) => commands::bench::run(&args),
    }
}
