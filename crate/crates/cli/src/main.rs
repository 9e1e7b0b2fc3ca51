//! `selconf`: score, combine and elicit confidence columns from the shell.

mod commands;
mod elicit;
mod score;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "selconf", version, about = "Selective-classification confidence toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask a chat model each question and append answer/confidence records.
    Elicit(ElicitArgs),
    /// Attach an external score column (e.g. a surrogate model's probabilities).
    Join(JoinArgs),
    /// Add the mixture (1 - alpha) * main + alpha * aux as a new column.
    Compose(ComposeArgs),
    /// Break ties in `main` using `aux` (mixture at alpha = 0.001).
    Tiebreak(TiebreakArgs),
    /// Evaluate the mixture AUC over an alpha grid.
    Sweep(SweepArgs),
    /// AUC, AUROC and ECE for each (dataset, source).
    Score(ScoreArgs),
    /// Correctness correlation between models and confidence clustering.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
pub struct ElicitArgs {
    /// Question file, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Record file; appended to, and existing examples are skipped.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub provider_config: PathBuf,
    #[arg(long, default_value = "best", value_parser = clap::builder::PossibleValuesParser::new(selconf_core::elicitation::TEMPLATE_IDS))]
    pub template: String,
    /// Column for the parsed confidence.
    #[arg(long, default_value = "linguistic")]
    pub source: String,
    /// Column for the answer probability, when the provider returns logprobs.
    #[arg(long, default_value = "answer_prob")]
    pub prob_source: String,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Requests per minute; overrides the provider config.
    #[arg(long)]
    pub rpm: Option<u32>,
}

#[derive(Args)]
pub struct JoinArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// CSV with `example_id` and a score column, or a record file.
    #[arg(long)]
    pub scores: PathBuf,
    /// Name of the new column.
    #[arg(long)]
    pub source: String,
    /// Column to read from the scores file. Defaults to `score` for CSV if
    /// present, otherwise the `--source` name.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub output: PathBuf,
    /// Replace the column if it already exists.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub main: String,
    #[arg(long)]
    pub aux: String,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub output: PathBuf,
    /// Column name; defaults to `mixture:<main>+<aux>@a=<alpha>`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args)]
pub struct TiebreakArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub main: String,
    #[arg(long)]
    pub aux: String,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub main: String,
    #[arg(long)]
    pub aux: String,
    /// Comma-separated alphas; defaults to 0, 0.001, 0.05, 0.10, ..., 1.
    #[arg(long)]
    pub grid: Option<String>,
    /// CSV of `alpha,auc`; printed to stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Choose alpha on a random (1 - fraction) of examples, report AUC on the rest.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Repeatable; every column in the file when omitted.
    #[arg(long)]
    pub source: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also estimate AUC by random tie-breaking with this many trials.
    #[arg(long)]
    pub mc_trials: Option<usize>,
    /// Report file, `.csv` or `.jsonl`. Curves go to `<stem>_curves/`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Repeatable: one record file per model.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Model names in `--input` order; file stems by default.
    #[arg(long)]
    pub name: Vec<String>,
    /// Confidence columns to profile (repeatable).
    #[arg(long)]
    pub source: Vec<String>,
    /// Correlation matrix CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// An error with its exit status: 1 usage or configuration, 2 data, 3 transport.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: e.into() }
}

pub fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

pub fn transport(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: e.into() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let result = match cli.command {
        Command::Elicit(a) => elicit::run(a),
        Command::Join(a) => commands::join(a),
        Command::Compose(a) => commands::compose(a),
        Command::Tiebreak(a) => commands::tiebreak(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Score(a) => score::run(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
