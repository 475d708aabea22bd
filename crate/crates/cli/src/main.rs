//! `amsgcn`: preprocess gait datasets, train and evaluate AMS-GCN
//! committees, run feature ablations, generate synthetic data and
//! summarize results.

mod commands;
mod config;
mod plots;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use amsgcn_core::error::ErrorClass;
use amsgcn_core::ensemble::{FusionStrategy, VoteScope};
use amsgcn_core::graph::GraphKind;
use amsgcn_core::preprocess::FeatureKind;
use amsgcn_core::run::Aggregation;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "amsgcn", version, about = "Skeleton-based pathological gait classification with STGCN expert committees")]
struct Cli {
    /// Log more detail (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Preprocess a dataset into a clip cache and print per-class clip counts.
    Preprocess(PreprocessArgs),
    /// Train a committee (or several runs over seeds and splits).
    Train(TrainArgs),
    /// Evaluate a trained run directory and write reports and plots.
    Eval(EvalArgs),
    /// Train once and score every feature subset up to a size cap.
    Ablate(AblateArgs),
    /// Generate a synthetic gait dataset with a subject-disjoint split.
    Synthesize(SynthesizeArgs),
    /// Aggregate the reports found under run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Built-in layout name or layout file replacing the manifest's layout.
    #[arg(long)]
    layout: Option<String>,
    /// Output directory for the clip cache and summary.
    #[arg(long, env = "AMSGCN_OUT", default_value = "runs")]
    out: PathBuf,
}

/// Flags shared by `train` and `ablate`. Every flag left unset keeps the
/// default; a `--config` file overrides flags.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Built-in layout name or layout file replacing the manifest's layout.
    #[arg(long)]
    pub layout: Option<String>,
    /// Built-in split name (e.g. mmgs-1) or split file.
    #[arg(long)]
    pub split: Option<String>,
    /// Several splits for the multi-run protocol; replaces --split.
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
    /// Feature streams, e.g. `coordinates,velocity` or `boneA`.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<FeatureKind>,
    /// Graphs: local, global or both.
    #[arg(long, value_delimiter = ',')]
    pub graphs: Vec<GraphKind>,
    /// Fusion: amsgcn, hard-weighted, soft-weighted, stacking or joint.
    #[arg(long)]
    pub fusion: Option<FusionStrategy>,
    /// Voters of weighted majority fusion: experts or features.
    #[arg(long)]
    pub vote_scope: Option<VoteScope>,
    /// Scoring unit: clip or subject.
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    /// Base seed; run r of a multi-run protocol uses seed + r.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Runs per split.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Epoch budget; learning-rate decay epochs scale with it.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Share of test subjects moved to validation for train/test split files.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Experts trained concurrently.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output root.
    #[arg(long, env = "AMSGCN_OUT")]
    pub out: Option<PathBuf>,
    /// JSON run configuration; its fields override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clip cache file to reuse or create.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Partitions to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "val,test")]
    partitions: Vec<String>,
    /// Dataset manifest; defaults to the one the run was trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split; defaults to the one the run was trained on.
    #[arg(long)]
    split: Option<String>,
    /// Scoring unit; defaults to the run's.
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Clip cache file to reuse or create.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Largest feature subset scored.
    #[arg(long, default_value_t = 4)]
    max_size: usize,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// Output directory for recordings, manifest.json and split.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    subjects: usize,
    /// Frames per walk.
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Walks per subject and class.
    #[arg(long, default_value_t = 1)]
    walks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON generator specification replacing the built-in benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or roots containing them.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Where to write summary.json; defaults to the first directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also redraw the plots of every report found.
    #[arg(long)]
    plots: bool,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Training => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a.manifest, a.layout.as_deref(), &a.out),
        Command::Train(a) => commands::train(&a.run),
        Command::Eval(a) => commands::eval(&commands::EvalOptions {
            run: a.run,
            partitions: a.partitions,
            manifest: a.manifest,
            split: a.split,
            aggregation: a.aggregation,
            cache: a.cache,
        }),
        Command::Ablate(a) => commands::ablate(&a.run, a.max_size),
        Command::Synthesize(a) => commands::synthesize(&a.out, a.subjects, a.frames, a.walks, a.seed, a.spec.as_deref()),
        Command::Report(a) => commands::report(&a.dirs, a.out.as_deref(), a.plots),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
