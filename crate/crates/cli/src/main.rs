mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;

const DEFAULT_STORE: &str = "runs";

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn fatal(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_FATAL,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

/// Self-training loop for text-to-image models: acquire prompts and
/// questions, curate generated samples, finetune, and benchmark.
#[derive(Debug, Parser)]
#[command(name = "dreamsync", version)]
pub struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run store root directory [default: runs]
    #[arg(long, global = true, env = "DREAMSYNC_STORE", value_name = "DIR")]
    store: Option<PathBuf>,

    /// Override the config's sampling seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Log verbosity on stderr
    #[arg(
        long,
        global = true,
        value_name = "LEVEL",
        default_value = "warn",
        value_parser = ["off", "error", "warn", "info", "debug", "trace"]
    )]
    log_level: String,

    /// Override one config field, e.g. --set thresholds.theta_aesthetic=0.5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate prompts and question/answer pairs with the configured language model
    Acquire {
        /// Corpus JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Acquisition report JSON [default: next to the corpus, as <stem>.report.json]
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Start a new self-training run
    Train,
    /// Continue an interrupted or failed run from its last checkpoint
    Resume { run_id: String },
    /// Benchmark one model version on an evaluation corpus
    Eval {
        /// Evaluation corpus JSONL
        #[arg(long, value_name = "FILE")]
        suite: PathBuf,
        /// Model version to evaluate [default: the config's base_model_version]
        #[arg(long, value_name = "VERSION")]
        model_version: Option<String>,
        /// Benchmark report JSON to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Suite name recorded in the report [default: the config's eval_suite]
        #[arg(long, value_name = "NAME", value_parser = ["tifa", "dsg1k", "custom"])]
        suite_name: Option<String>,
        /// Question scoring mode [default: dependency for dsg1k, flat otherwise]
        #[arg(long, value_name = "MODE", value_parser = ["flat", "dependency"])]
        mode: Option<String>,
        /// JSON array of {"prompt_id", "score"} preference scores to attach
        #[arg(long, value_name = "FILE")]
        preference: Option<PathBuf>,
    },
    /// Render a comparison table from benchmark reports (first is the baseline)
    Report {
        /// Report JSON files
        #[arg(value_name = "REPORT")]
        reports: Vec<PathBuf>,
        /// Use every report stored for this run, in iteration order
        #[arg(long, value_name = "RUN_ID")]
        run: Option<String>,
    },
    /// Show a run's status, checkpoints and reports
    Inspect {
        run_id: String,
        /// Print the raw manifest JSON
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let store = cli.store.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_STORE));
    let load = || settings::load(cli.config.as_deref(), &cli.overrides, cli.seed);
    match cli.command {
        Command::Acquire { out, report } => commands::acquire(&load()?, &out, report.as_deref()),
        Command::Train => commands::train(&load()?, &store),
        Command::Resume { ref run_id } => {
            if cli.config.is_some() || !cli.overrides.is_empty() || cli.seed.is_some() {
                log::warn!(
                    "resume uses the configuration recorded with the run; --config, --set and --seed are ignored"
                );
            }
            commands::resume(&store, run_id)
        }
        Command::Eval {
            ref suite,
            ref model_version,
            ref out,
            ref suite_name,
            ref mode,
            ref preference,
        } => commands::eval(
            &load()?,
            &commands::EvalArgs {
                suite,
                model_version: model_version.as_deref(),
                out,
                suite_name: suite_name.as_deref(),
                mode: mode.as_deref(),
                preference: preference.as_deref(),
            },
        ),
        Command::Report { ref reports, ref run } => commands::report(&store, reports, run.as_deref()),
        Command::Inspect { ref run_id, json } => commands::inspect(&store, run_id, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
