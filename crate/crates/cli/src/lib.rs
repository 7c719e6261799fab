//! `sitqa` command-line driver and the annotation HTTP service.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod remote;
pub mod rundir;
pub mod server;
pub mod settings;

/// Bad invocation: missing inputs, conflicting flags, invalid settings.
/// Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "sitqa",
    version,
    about = "Generate, validate, annotate and evaluate situational household queries"
)]
pub struct Cli {
    /// JSON settings file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory (default: runs/<timestamp>-<command>).
    #[arg(short = 'o', long = "out", global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Verbose logging, including remote request and response bodies.
    #[arg(long, global = true)]
    pub debug: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the generate/deduplicate loop against a chat model.
    Generate(GenerateArgs),
    /// Check datapoints against the abstraction, binary and contextual rules.
    Validate(ValidateArgs),
    /// Split datapoints into per-object consensus questions.
    Decompose(DecomposeArgs),
    /// Serve an annotation study over HTTP.
    AnnotateServe(ServeArgs),
    /// Score answerers against annotated ground truth.
    Evaluate(EvaluateArgs),
    /// Room, situational and temporal breakdowns plus length statistics.
    Analyze(AnalyzeArgs),
    /// Write embeddings and category labels for external plotting.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args, Default)]
pub struct ProviderArgs {
    #[arg(long, value_name = "FILE")]
    pub scene: Option<PathBuf>,
    #[arg(long, value_name = "URL")]
    pub chat_endpoint: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub chat_replay: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    pub model: Option<String>,
    #[arg(long, value_name = "URL")]
    pub embedding_endpoint: Option<String>,
    #[arg(long, value_name = "NAME")]
    pub embedding_model: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub embedding_replay: Option<PathBuf>,
    #[arg(long, value_name = "D")]
    pub embedding_dim: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub classifier_replay: Option<PathBuf>,
    #[arg(long)]
    pub classify_with_chat: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub providers: ProviderArgs,
    /// Datapoints requested per batch.
    #[arg(long)]
    pub n: Option<usize>,
    /// Maximum iterations.
    #[arg(long)]
    pub m: Option<usize>,
    /// Cluster representatives fed back per iteration.
    #[arg(long)]
    pub k: Option<usize>,
    /// Per-query cosine similarity threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Batch similarity percentage that triggers regeneration.
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub max_regen: Option<usize>,
    #[arg(long)]
    pub target_size: Option<usize>,
    /// Save live chat responses as a replay transcript.
    #[arg(long)]
    pub record_transcript: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub providers: ProviderArgs,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Extra words to block besides the scene's class names.
    #[arg(long, value_delimiter = ',')]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Also write the datapoints with room names replaced by "this place".
    #[arg(long)]
    pub genericize: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Datapoints to build the study from.
    #[arg(long, value_name = "FILE", required_unless_present = "tasks")]
    pub input: Option<PathBuf>,
    /// Prebuilt task list (JSONL) instead of --input.
    #[arg(long, value_name = "FILE", conflicts_with = "input")]
    pub tasks: Option<PathBuf>,
    /// Situational:consensus task ratio, e.g. 1:1.
    #[arg(long, value_name = "S:C")]
    pub mix: Option<String>,
    #[arg(long)]
    pub annotators: Option<usize>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Static UI bundle served at /.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    /// Annotation log to resume from and append to (default: in the run directory).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Stop once every task has all its annotations.
    #[arg(long)]
    pub exit_when_complete: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub providers: ProviderArgs,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Ground-truth JSONL from an annotation study.
    #[arg(long, value_name = "FILE")]
    pub ground_truth: PathBuf,
    /// oracle, llm, or recorded (repeatable).
    #[arg(long, value_delimiter = ',', default_value = "oracle")]
    pub answerer: Vec<String>,
    /// Recorded predictions as NAME=FILE (repeatable).
    #[arg(long, value_name = "NAME=FILE")]
    pub recorded: Vec<String>,
    /// Judge each datapoint on the scene with its consensus applied.
    #[arg(long)]
    pub apply_consensus: bool,
    /// Ask the chat model for a short justification of each answer.
    #[arg(long)]
    pub reasoning: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub providers: ProviderArgs,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Count a trailing question mark in character lengths.
    #[arg(long)]
    pub keep_question_mark: bool,
    #[arg(long, default_value_t = 10)]
    pub char_bin: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub providers: ProviderArgs,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Validate(_) => "validate",
            Command::Decompose(_) => "decompose",
            Command::AnnotateServe(_) => "annotate-serve",
            Command::Evaluate(_) => "evaluate",
            Command::Analyze(_) => "analyze",
            Command::ExportEmbeddings(_) => "export-embeddings",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.debug {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("SITQA_LOG")
        .try_init();
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_DOMAIN
    }
}
