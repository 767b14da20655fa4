//! `vlnmp` command-line tool.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use vlnmp::dataset_eval::PhraseScorer;
use vlnmp::instruction::Setting;
use vlnmp::io::DatasetError;
use vlnmp::pipeline::PipelineError;

pub use config::{FileConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input data or arguments. Exit code 1.
    #[error("{0}")]
    Invalid(String),
    /// Client, network or file system failure. Exit code 2.
    #[error("{0}")]
    Environment(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Environment(_) => 2,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Environment(e.to_string()),
            DatasetError::Parse { .. } => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_environmental() {
            CliError::Environment(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vlnmp",
    version,
    about = "Build and evaluate multi-modal navigation instructions"
)]
pub struct Cli {
    /// Key-value settings file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-instruction work
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print a JSON summary to standard output
    #[arg(long, global = true)]
    pub summary: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select prompt images from precomputed detector candidates
    Align(AlignArgs),
    /// Run the full generation pipeline with fixture or remote clients
    Build(BuildArgs),
    /// Score trajectories with SR, SPL, nDTW and GP
    EvalNav(EvalNavArgs),
    /// Compare extracted landmark phrases with gold phrases
    EvalPhrases(EvalPhrasesArgs),
    /// Compare the viewpoints of selected images with gold viewpoints
    EvalViewpoints(EvalViewpointsArgs),
    /// Build Aligned instructions from images along agents' own paths
    PreExplore(PreExploreArgs),
    /// Landmark counts of an instruction file
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub instructions: PathBuf,
    /// Candidate sets (candidates.jsonl)
    #[arg(long)]
    pub candidates: PathBuf,
    /// Settings to write; may be repeated [default: aligned, related, terminal]
    #[arg(long, value_parser = parse_setting)]
    pub setting: Vec<Setting>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub instructions: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Detector fixture (candidates.jsonl); otherwise the configured detect endpoint is used
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub detect_endpoint: Option<String>,
    /// Extractor fixture, consulted for instructions without phrases
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long)]
    pub extract_endpoint: Option<String>,
    /// Captioner fixture
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub caption_endpoint: Option<String>,
    /// Generated image variants (augment.jsonl)
    #[arg(long)]
    pub augment: Option<PathBuf>,
    /// Substitution probability for augmented images [default: 0.2]
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_setting)]
    pub setting: Vec<Setting>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalNavArgs {
    /// Navigation graph (graph.json)
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Success radius in metres
    #[arg(long, default_value_t = vlnmp::nav::SUCCESS_THRESHOLD)]
    pub threshold: f64,
    /// Per-episode results (JSONL)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPhrasesArgs {
    /// Predicted phrases, `{"instruction_id", "phrases": [...]}` per line
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value = "fuzzy", value_parser = parse_scorer)]
    pub scorer: PhraseScorer,
    /// Match threshold [default: 0.8 for fuzzy, 0.5 for rouge-l]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Per-instruction reports (JSONL)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalViewpointsArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Multi-modal instructions whose prompts carry `node_id`
    #[arg(long)]
    pub selections: PathBuf,
    /// Gold records with per-phrase `viewpoints`
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreExploreArgs {
    #[arg(long)]
    pub instructions: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Pseudo paths, one trajectory record per instruction
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Candidates with `node_id`; otherwise the configured detect endpoint is used
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub detect_endpoint: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Text or multi-modal instruction file
    #[arg(long)]
    pub input: PathBuf,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse()
}

fn parse_scorer(s: &str) -> Result<PhraseScorer, String> {
    s.parse()
}

/// Runs the tool and returns its exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    match commands::dispatch(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
