mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use boningknife::Error;
use clap::{Args, Parser, Subcommand};

/// Nested named-entity recognition: generate data, train, evaluate, predict.
#[derive(Parser, Debug)]
#[command(name = "boningknife", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic nested corpus split into train/dev/test files.
    Gen(GenArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Tag a corpus with a checkpoint.
    Predict(PredictArgs),
    /// Compare typing with tagger candidates against typing every span.
    Bench(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sentences before splitting.
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Number of entity types.
    #[arg(long)]
    pub types: Option<usize>,
    /// Maximum nesting depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Distinct word types the generator may emit.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Probability that a mention wraps another.
    #[arg(long)]
    pub nest_prob: Option<f64>,
    /// Train/dev/test ratios, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    /// Overwrite existing split files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training corpus (JSON lines).
    #[arg(long)]
    pub train: PathBuf,
    /// Development corpus, evaluated after every epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total epochs, counting those already done when resuming.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sentences per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialisation, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write checkpoint-epochN.json every N epochs (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Longest span the tagger enumerates.
    #[arg(long)]
    pub max_span_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled corpus (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus to tag; `entities` may be omitted.
    #[arg(long)]
    pub data: PathBuf,
    /// Output file (JSON lines); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write head-averaged global and focus attention matrices as CSV here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } | Error::Validation(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
