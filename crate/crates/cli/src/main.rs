mod commands;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Backend(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "speech-firewall",
    version,
    about = "Filter spoken phrases before they reach a voice assistant"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct PolicyArg {
    /// Policy file; the built-in default policy is used when unset.
    #[arg(long, env = "SPEECH_FIREWALL_CONFIG")]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SttArgs {
    /// passthrough, table:<fixture> or external:<cmd>
    #[arg(long, default_value = "passthrough")]
    pub stt: String,
    /// Per-word recognition error rate injected after transcription.
    #[arg(long, default_value_t = 0.0)]
    pub stt_error_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict injected errors to words of the policy's literal patterns.
    #[arg(long)]
    pub keyword_errors: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub policy: PolicyArg,
    /// Mono 16-bit PCM WAV recording.
    #[arg(long, conflicts_with_all = ["transcripts", "live"], required_unless_present_any = ["transcripts", "live"])]
    pub input: Option<PathBuf>,
    /// JSON-lines transcript events.
    #[arg(long, conflicts_with = "live")]
    pub transcripts: Option<PathBuf>,
    /// Capture from the default microphone.
    #[arg(long)]
    pub live: bool,
    #[command(flatten)]
    pub stt: SttArgs,
    #[arg(long)]
    pub out_wav: Option<PathBuf>,
    /// JSON-lines decision log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Audit report written on exit.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Include transcripts in the decision log (debugging only).
    #[arg(long)]
    pub log_text: bool,
    /// Largest tolerated fraction of phrases the backend fails on.
    #[arg(long, default_value_t = 0.10)]
    pub max_failure_rate: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub stt: SttArgs,
    /// Add wall-clock stage timings (output is then not reproducible).
    #[arg(long)]
    pub timings: bool,
    /// Parallel workers; only used for stateless policies.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Fraction of phrases embedding a rule pattern.
    #[arg(long, default_value_t = 0.1)]
    pub sensitive: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub gap_ms: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value = "passthrough")]
    pub stt: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a recording or transcript stream.
    Run(RunArgs),
    /// Compare a labeled corpus against the filtered output.
    Eval(EvalArgs),
    /// Generate a seeded, labeled corpus.
    GenCorpus(GenCorpusArgs),
    /// Time each pipeline stage per phrase.
    Bench(BenchArgs),
    /// Validate a policy file: exit 0 clean, 1 warnings, 2 errors.
    CheckConfig { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => pipeline::cmd_run(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::GenCorpus(args) => commands::cmd_gen_corpus(&args),
        Command::Bench(args) => commands::cmd_bench(&args),
        Command::CheckConfig { path } => commands::cmd_check_config(&path),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("speech-firewall: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
