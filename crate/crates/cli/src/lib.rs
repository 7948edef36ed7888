//! Command-line front end: each subcommand runs one pipeline stage, writes its
//! outputs under `--out` and finishes with a `manifest.json` listing them.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::PipelineConfig;
pub use manifest::{Manifest, Outputs};

/// Validation errors (bad input or configuration) exit with 2, failures
/// while running a valid request with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "msmap",
    version,
    about = "Multi-session mapping, change detection and planning"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML pipeline configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for every randomized stage; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge session directories into one frame.
    Merge {
        /// Session directories, or directories containing them.
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
    },
    /// Difference a prior map against a new session and update the latest map.
    Detect {
        /// A `.msot` octree, or session directories to build it from.
        #[arg(long, required = true, num_args = 1..)]
        prior: Vec<PathBuf>,
        /// Session directories of the new observation.
        #[arg(long, required = true, num_args = 1..)]
        current: Vec<PathBuf>,
    },
    /// Build the traversability-scored elevation map from the latest map.
    Navmap {
        #[arg(long)]
        latest: PathBuf,
        /// Session directories whose place labels define the clusters.
        #[arg(long, required = true, num_args = 1..)]
        sessions: Vec<PathBuf>,
        /// `inter_edges.json` from `merge`; joins clusters across sessions.
        #[arg(long)]
        inter: Option<PathBuf>,
    },
    /// Plan a path on an exported navigation map.
    Plan {
        /// Metadata file written by `navmap`.
        #[arg(long)]
        navmap: PathBuf,
        /// `x,y` in the map frame.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        start: [f64; 2],
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        goal: [f64; 2],
    },
    /// Generate synthetic sessions with ground truth.
    Synth {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Score outputs against synthetic ground truth.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Directory written by `synth` (its `truth/` subdirectory or itself).
        #[arg(long)]
        truth: PathBuf,
        /// Sessions to score (`traj`, `map`).
        #[arg(long, num_args = 1..)]
        sessions: Vec<PathBuf>,
        /// Output directory of `detect` (`change`).
        #[arg(long)]
        detect: Option<PathBuf>,
        /// Prior and current session ids, `a,b` (`change`).
        #[arg(long)]
        pair: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Traj,
    Map,
    Change,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Traj => "traj",
            EvalMode::Map => "map",
            EvalMode::Change => "change",
        }
    }
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected x,y but got `{s}`"));
    }
    let mut out = [0.0f64; 2];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(out)
}

/// Runs one parsed invocation and returns the manifest it wrote.
pub fn run(cli: Cli) -> Result<Manifest, CliError> {
    let cfg = PipelineConfig::load(cli.global.config.as_deref())?.with_seed(cli.global.seed);
    cfg.validate()?;
    commands::dispatch(&cfg, &cli.global, cli.command)
}
