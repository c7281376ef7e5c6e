//! `featflow` command line: runs the base -> fine-tunes -> merge lineage and
//! its feature-flow analysis from a single TOML run config.

// `!(x > 0.0)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod layout;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use featflow::Error;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    /// An upstream artifact is absent; `producer` is the subcommand that writes it.
    MissingArtifact { path: PathBuf, producer: &'static str },
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::MissingArtifact { path, producer } => {
                write!(f, "missing artifact {}; run `featflow {producer}` first", path.display())
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            e => CliError::Core(e),
        }
    }
}

pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const CONTRACT: i32 = 4;
    pub const PROVIDER: i32 = 5;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingArtifact { .. } => exit::IO,
            CliError::Core(e) => match e {
                Error::Config(_) => exit::CONFIG,
                Error::Io { .. } | Error::Format { .. } => exit::IO,
                Error::Contract(_)
                | Error::MergeCompat(_)
                | Error::Comparability(_)
                | Error::UndefinedMetric(_)
                | Error::NonFinite { .. }
                | Error::Divergence { .. } => exit::CONTRACT,
                Error::Transport(_) | Error::Protocol { .. } | Error::MissingFixture { .. } => exit::PROVIDER,
                #[allow(unreachable_patterns)]
                _ => exit::OTHER,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "featflow", version, about = "Feature evolution across fine-tuned and merged language models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config (TOML).
    #[arg(long, short, global = true, default_value = "featflow.toml")]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides `threads` (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Query the LLM provider instead of replaying recorded fixtures.
    #[arg(long, global = true)]
    pub live_llm: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ModelArg {
    /// Restrict to one lineage model.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct PairArgs {
    /// Parent model; with --child, selects one edge (may equal the child).
    #[arg(long, requires = "child")]
    pub parent: Option<String>,
    #[arg(long, requires = "parent")]
    pub child: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic corpora.
    SynthData,
    /// Train the BPE tokenizer.
    TokenizerTrain,
    /// Train the base model.
    LmTrain,
    /// Fine-tune the base model on each fine-tune's corpora.
    LmFinetune(ModelArg),
    /// Accuracy and loss of lineage models on every validation stream.
    LmEval(ModelArg),
    /// Evaluate SLERP merges of the two fine-tunes over the grid.
    MergeSweep,
    /// Pick the equilibrium merge and write the merged model.
    MergeSelect,
    /// Train one SAE per model on its MLP activations.
    SaeTrain(ModelArg),
    /// Collect SAE activations on the shared token stream.
    Collect(ModelArg),
    /// Best-match feature correlations for lineage edges.
    Correlate(PairArgs),
    /// Persisting / emerging / disappearing classification.
    Classify {
        #[command(flatten)]
        pair: PairArgs,
        /// Overrides `classify.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compose the four edges into the lineage flow graph and Sankey export.
    FlowGraph,
    /// Rank features by log-likelihood ratio under each hypothesis.
    Llr(ModelArg),
    /// Explain, simulate and score a sample of features.
    Explain(ModelArg),
    /// Token-highlight HTML pages for selected features.
    Report {
        #[command(flatten)]
        model: ModelArg,
        /// Specific features (requires --model).
        #[arg(long, requires = "model", value_delimiter = ',')]
        feature: Vec<usize>,
    },
    /// Every stage in order.
    Pipeline,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.global.config)?;
    if let Some(out) = &cli.global.out {
        cfg.out_dir = std::env::current_dir().map(|d| d.join(out)).unwrap_or_else(|_| out.clone());
    }
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.global.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    commands::Ctx::new(cfg, cli.global.live_llm).dispatch(&cli.command)
}
