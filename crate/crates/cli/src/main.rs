mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const AFTER_HELP: &str = "\
Configuration precedence, lowest to highest:
  built-in defaults < --config file < CMTA_* environment paths < --set and flags

The config file is JSON, or key=value lines with dotted keys (model.hidden=32).
Unknown keys are errors. Environment variables override paths only:
  CMTA_DATASET, CMTA_VOCAB, CMTA_CHECKPOINT, CMTA_STOPWORDS, CMTA_OUTPUT

Exit codes: 0 success, 1 invalid configuration or missing inputs, 2 runtime failure.";

#[derive(Debug, Parser)]
#[command(name = "cmta", version, about = "Multilingual misinformation classification pipeline", after_help = AFTER_HELP)]
pub struct Cli {
    /// Config file (JSON or key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads for corpus classification.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for generated artifacts.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Report failures as one JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a dataset and write it back with a clean_text field.
    Prep(commands::PrepArgs),
    /// Build a WordPiece vocabulary from a dataset.
    BuildVocab(commands::BuildVocabArgs),
    /// Split a labeled dataset and train the classifier.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(commands::EvalArgs),
    /// Predict labels for a corpus, streaming it in chunks.
    Classify(commands::ClassifyArgs),
    /// Aggregate classify output by language, month and class.
    Analyze(commands::AnalyzeArgs),
    /// Train monolingual models and a multilingual one and compare them.
    Compare(commands::CompareArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if cli.error_json {
                let v = serde_json::json!({
                    "error": f.kind(),
                    "exit_code": f.code(),
                    "message": f.message(),
                });
                eprintln!("{v}");
            } else {
                eprintln!("error: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}
