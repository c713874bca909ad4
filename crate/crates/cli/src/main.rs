mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const AFTER_HELP: &str = "\
Config precedence: built-in defaults < JSON config file < command-line flags.

Exit codes:
  0 success          2 usage          3 config        4 missing-file
  5 schema           6 format         7 label         8 contract
  9 dimension       10 length        11 training     12 degenerate-input
 13 io               1 other

Failures print one line to stderr: `error kind=<category>: <message>`.";

#[derive(Parser, Debug)]
#[command(name = "longnote", version, about = "Long-context clinical note models: data, training, extension, evaluation")]
#[command(after_help = AFTER_HELP)]
struct Cli {
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic note corpus with planted, annotated signals
    GenerateData(GenerateArgs),
    /// Turn patient note histories into tokenized examples
    BuildExamples(BuildArgs),
    /// Train an encoder on cached examples
    Train(TrainArgs),
    /// Extend a checkpoint to a longer context with windowed+global attention
    Extend(ExtendArgs),
    /// Score a checkpoint (or a predictions file) and write an evaluation report
    Evaluate(EvaluateArgs),
    /// Aggregate input-gradient saliency by note year
    AnalyzeImportance(ImportanceArgs),
    /// Train and evaluate the tabular feed-forward baseline
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Generator spec (JSON); missing fields take defaults
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the generator's patient count
    #[arg(long)]
    pub n_patients: Option<usize>,
    /// Also write a separable tabular encounter set for this many patients
    #[arg(long)]
    pub tabular_patients: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Notes, JSON Lines
    #[arg(long)]
    pub notes: PathBuf,
    /// Label taxonomy (JSON) for diagnosis targets
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Token budget per example; presets 512, 1024, 2048, 4096, 8192
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    /// Reuse a vocabulary instead of building one from the training split
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Keep only each patient's longest-history example
    #[arg(long)]
    pub final_only: bool,
    #[arg(long, default_value_t = 0.6)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub valid_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training examples, JSON Lines
    #[arg(long)]
    pub examples: PathBuf,
    /// Validation examples used for checkpoint selection
    #[arg(long)]
    pub valid_examples: PathBuf,
    /// diagnosis, mortality or labels
    #[arg(long, default_value = "diagnosis")]
    pub task: String,
    /// Model config (JSON); ignored with --init-checkpoint
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Fills vocab_size when the model config omits it
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Fills the head when the model config omits it (diagnosis task)
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub new_max_positions: usize,
    /// Half window w: each token sees positions i-w..=i+w
    #[arg(long, default_value_t = longnote::attention::DEFAULT_HALF_WINDOW)]
    pub window: usize,
    /// Global positions (comma separated); must include 0
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub global: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "predictions")]
    pub examples: Option<PathBuf>,
    /// Score an existing predictions file instead of running a model
    #[arg(long, conflicts_with_all = ["checkpoint", "examples"])]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "diagnosis")]
    pub task: String,
    /// Names per-class rows in the report
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, default_value = "mortality")]
    pub task: String,
    #[arg(long, default_value_t = 1000)]
    pub n_top: usize,
    /// Keep tokens whose saliency exceeds this fraction of the example total
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    /// Count each note once instead of every kept token
    #[arg(long)]
    pub per_note: bool,
    /// Leave the generation time out of the SVG
    #[arg(long)]
    pub no_timestamp: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// Encounters, JSON Lines
    #[arg(long)]
    pub encounters: PathBuf,
    /// Feature block spec (JSON); defaults to the standard 9-block layout
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Hidden layer sizes
    #[arg(long, value_delimiter = ',', default_value = "1024,512,256")]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "missing-file" => 4,
        "schema" => 5,
        "format" => 6,
        "label" => 7,
        "contract" => 8,
        "dimension" => 9,
        "length" => 10,
        "training" => 11,
        "degenerate-input" => 12,
        "io" => 13,
        _ => 1,
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<longnote::Error>() {
            return e.category();
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound {
                "missing-file"
            } else {
                "io"
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "schema";
        }
    }
    "other"
}

/// The error chain on one line, skipping causes already spelled out by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error kind=config: cannot set thread count: {e}");
            return ExitCode::from(exit_code("config"));
        }
    }
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate_data(a),
        Command::BuildExamples(a) => commands::build_examples(a),
        Command::Train(a) => commands::train(a),
        Command::Extend(a) => commands::extend(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::AnalyzeImportance(a) => commands::analyze_importance(a),
        Command::Baseline(a) => commands::baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = category(&e);
            let msg = message(&e);
            eprintln!("error kind={kind}: {msg}");
            ExitCode::from(exit_code(kind))
        }
    }
}
