use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "augloop", version, about = "Search for image augmentation code with an LLM in the loop")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// Directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// TOML file with one table per command; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate, render and evaluate brute-force pipelines into a store.
    Brute(BruteArgs),
    /// Build "B better than A" pairs from a store and emit a dataset.
    Pairs(PairsArgs),
    /// Run the generate, evaluate, filter, fine-tune loop.
    Loop(Box<LoopArgs>),
    /// Recompute reports from a run directory or a store.
    Stats(StatsArgs),
    /// Write a store to a portable export file.
    Export(ExportArgs),
    /// Append an export file to a store, keeping record ids.
    Import(ImportArgs),
    /// Serve the mock LLM endpoint and mock worker until interrupted.
    MockServe(MockServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Brute(_) => "brute",
            Command::Pairs(_) => "pairs",
            Command::Loop(_) => "loop",
            Command::Stats(_) => "stats",
            Command::Export(_) => "export",
            Command::Import(_) => "import",
            Command::MockServe(_) => "mock-serve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArityArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

impl ArityArg {
    pub fn arities(self) -> Vec<usize> {
        match self {
            ArityArg::One => vec![1],
            ArityArg::Two => vec![2],
            ArityArg::Three => vec![3],
            ArityArg::All => vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorArg {
    /// Deterministic in-process scorer with a synthetic feature table.
    Surrogate,
    /// HTTP worker at --worker-url.
    Worker,
    /// Leave records unevaluated.
    None,
}

#[derive(Debug, Clone, Args)]
pub struct WorkerArgs {
    #[arg(long, env = "AUGLOOP_WORKER_URL", default_value = "http://127.0.0.1:8002")]
    pub worker_url: String,
    /// Evaluation jobs in flight at once.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub in_flight: u32,
    /// Per-job timeout in seconds.
    #[arg(long, default_value_t = 900)]
    pub eval_timeout: u64,
}

#[derive(Debug, Args)]
pub struct BruteArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub arity: ArityArg,
    /// Pipelines per arity.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "surrogate")]
    pub evaluator: EvaluatorArg,
    #[arg(long, default_value = "store.jsonl")]
    pub store: PathBuf,
    /// Add to a store that already has records.
    #[arg(long)]
    pub append: bool,
    /// Transform catalog in TOML; the built-in catalog when absent.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Directory for the rendered `bf_<arity>_<index>.txt` files.
    #[arg(long, default_value = "brute")]
    pub out_dir: PathBuf,
    /// Skip writing one file per pipeline.
    #[arg(long)]
    pub no_files: bool,
    #[command(flatten)]
    pub worker: WorkerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Curated,
    Unfiltered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    UniformBetter,
    NearestBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptArg {
    Direct,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferencesArg {
    /// New reference pair for every candidate.
    Fresh,
    /// One reference pair per epoch.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorArg {
    /// In-process deterministic mock that recombines the references.
    Mock,
    /// Chat-completion endpoint at --llm-url.
    Http,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long, default_value = "store.jsonl")]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "curated")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "uniform-better")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub augment_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "datasets/pairs.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long, default_value_t = 28, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    /// Candidates generated per epoch.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_epoch: u64,
    /// Candidates scoring strictly above this join the fine-tune pool.
    #[arg(long, default_value_t = 0.55, value_parser = unit_interval)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "direct")]
    pub prompt: PromptArg,
    #[arg(long, value_enum, default_value = "curated")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 70)]
    pub top_k: u32,
    #[arg(long, default_value_t = 16384)]
    pub max_new_tokens: u32,
    #[arg(long, default_value_t = 0)]
    pub reference_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub pairing_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub generation_seed: u64,
    #[arg(long, value_enum, default_value = "uniform-better")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub augment_fraction: f64,
    #[arg(long, value_enum, default_value = "fresh")]
    pub references: ReferencesArg,
    /// Re-request invalid or failed slots, up to two extra rounds per epoch.
    #[arg(long)]
    pub top_up: bool,
    /// POST each job to the worker's /finetune and stop the loop if it fails.
    #[arg(long)]
    pub synchronous_finetune: bool,
    #[arg(long, value_enum, default_value = "mock")]
    pub generator: GeneratorArg,
    #[arg(long, value_enum, default_value = "surrogate")]
    pub evaluator: EvaluatorArg,
    /// Store holding the initial training data (normally the brute store).
    #[arg(long, default_value = "store.jsonl")]
    pub base_store: PathBuf,
    /// Run name; outputs go to runs/<name>/.
    #[arg(long, default_value = "run")]
    pub run: String,
    /// Replace an existing run directory of the same name.
    #[arg(long)]
    pub force: bool,
    /// Keep every epoch's dataset instead of only the latest.
    #[arg(long)]
    pub keep_datasets: bool,
    /// Re-run exactly what a previous run's manifest recorded.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long, env = "AUGLOOP_LLM_URL", default_value = "http://127.0.0.1:8001/v1")]
    pub llm_url: String,
    #[arg(long, env = "AUGLOOP_LLM_MODEL", default_value = "olympiccoder-7b")]
    pub llm_model: String,
    #[arg(long, env = "AUGLOOP_LLM_API_KEY", hide_env_values = true)]
    pub llm_api_key: Option<String>,
    /// Per-request timeout for the LLM endpoint, seconds.
    #[arg(long, default_value_t = 300)]
    pub llm_timeout: u64,
    /// Attempts per LLM request, including the first.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub llm_attempts: u32,
    /// Concurrent LLM requests.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub llm_parallelism: u32,
    #[command(flatten)]
    pub worker: WorkerArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Run directory name under runs/.
    #[arg(long, conflicts_with = "store")]
    pub run: Option<String>,
    /// Summarize a store instead of a run.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Records listed in the store summary.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "store.jsonl")]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long, default_value = "store.jsonl")]
    pub store: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LlmModeArg {
    Recombine,
    Echo,
    FailEveryOther,
    RejectTopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorkerModeArg {
    Surrogate,
    Fixed,
    Reject,
    CrashAfter,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    #[arg(long, default_value = "127.0.0.1:8001")]
    pub llm_addr: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:8002")]
    pub worker_addr: SocketAddr,
    #[arg(long, value_enum, default_value = "recombine")]
    pub llm_mode: LlmModeArg,
    /// Reply text for --llm-mode echo.
    #[arg(long, default_value = "<tr>ok</tr>")]
    pub echo_text: String,
    #[arg(long, value_enum, default_value = "surrogate")]
    pub worker_mode: WorkerModeArg,
    /// Accuracy for --worker-mode fixed.
    #[arg(long, default_value_t = 0.52, value_parser = unit_interval)]
    pub fixed_accuracy: f64,
    /// Jobs answered before --worker-mode crash-after fails.
    #[arg(long, default_value_t = 10)]
    pub crash_after: usize,
    /// Extra delay per evaluation, milliseconds.
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
}
