//! `matformer`: train, extract, search, decode and report on nested
//! transformers from the command line.
//!
//! Exit codes: 0 success, 2 user or configuration error, 3 numeric failure.

mod commands;
mod output;
mod par;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matformer::search::BudgetMetric;
use matformer::Error;

#[derive(Parser)]
#[command(name = "matformer", version, about = "Nested transformer training and Mix'n'Match tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config; writes the checkpoint, log and eval summary.
    Train(TrainArgs),
    /// Extract a Mix'n'Match submodel into a standalone checkpoint.
    Extract(ExtractArgs),
    /// Pick a submodel under a parameter or FLOP budget.
    Search(SearchArgs),
    /// Speculative decoding with a draft and a verifier submodel.
    Specdecode(SpecdecodeArgs),
    /// Token-match and KL consistency of every granularity with a reference.
    Consistency(ConsistencyArgs),
    /// Adaptive retrieval on synthetic clustered sequences.
    Retrieve(RetrieveArgs),
    /// Fit Loss(N, D) = a (N D)^b + c to a CSV of runs.
    ScalingFit(ScalingFitArgs),
    /// Emit plot-ready CSVs for a completed run directory.
    Report(ReportArgs),
    /// Write the synthetic training text used by the examples.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 1-based granularity per layer, e.g. "2,2,3,4".
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where evaluation tokens come from when a command measures loss. Values
/// recorded in the checkpoint by `train` are used unless overridden.
#[derive(Args, Clone, Default)]
pub struct EvalSource {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Seed that placed the validation block.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Heuristic,
    Nas,
    Exhaustive,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Params,
    FlopsPerToken,
}

impl From<MetricArg> for BudgetMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Params => BudgetMetric::Params,
            MetricArg::FlopsPerToken => BudgetMetric::FlopsPerToken,
        }
    }
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub budget: u64,
    #[arg(long, value_enum, default_value = "params")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "heuristic")]
    pub method: Method,
    /// Configs measured to fit the loss predictor (nas).
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub source: EvalSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SpecdecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub draft: String,
    #[arg(long)]
    pub verifier: String,
    #[arg(long)]
    pub prompt_file: PathBuf,
    /// Read the prompt as whitespace-separated token ids instead of bytes.
    #[arg(long)]
    pub token_ids: bool,
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub lookahead: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub shared_cache: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference config; the full model when absent.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub prefixes: usize,
    #[arg(long, default_value_t = 16)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long)]
    pub teacher_forced: bool,
    /// Report KL(large || small) instead of KL(small || large).
    #[arg(long)]
    pub reverse_kl: bool,
    #[command(flatten)]
    pub source: EvalSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RetrieveArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Persist the universal-encoder document index.
    #[arg(long)]
    pub index_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScalingFitArgs {
    /// CSV with header N,D,loss.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Largest g^l swept exhaustively for pareto.csv; bigger spaces use the
    /// least-slope candidates.
    #[arg(long, default_value_t = 4096)]
    pub max_configs: u128,
}

#[derive(Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn dispatch(command: Command) -> matformer::Result<()> {
    match command {
        Command::Train(a) => run::train(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Search(a) => commands::search(&a),
        Command::Specdecode(a) => commands::specdecode(&a),
        Command::Consistency(a) => commands::consistency(&a),
        Command::Retrieve(a) => commands::retrieve(&a),
        Command::ScalingFit(a) => commands::scaling_fit(&a),
        Command::Report(a) => commands::report(&a),
        Command::GenCorpus(a) => commands::gen_corpus(&a),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("matformer: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
