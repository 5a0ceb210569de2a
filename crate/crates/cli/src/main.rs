//! zeroseg: discover subword units from unlabeled speech features and
//! evaluate them against a reference alignment. Each subcommand is one
//! pipeline stage; `pipeline` chains them from a config file.

mod config;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zeroseg_core::Result;

use crate::manifest::{Manifest, StageRecord};

#[derive(Parser)]
#[command(
    name = "zeroseg",
    version,
    about = "zero-resource subword unit discovery"
)]
struct Cli {
    /// Worker threads for parallel stages; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth.
    GenCorpus(stages::GenCorpusArgs),
    /// Mean-normalize, add deltas to, or splice a feature archive.
    Features(stages::FeaturesArgs),
    /// Fit the Dirichlet-process mixture and label every frame.
    Dpgmm(stages::DpgmmArgs),
    /// Mask the clusters outside a cumulative frame-share budget.
    FilterLabels(stages::FilterLabelsArgs),
    /// Collapse frame labels into token transcriptions.
    Collapse(stages::CollapseArgs),
    /// Fuse boundary sets under a minimum-duration constraint.
    FuseBounds(stages::FuseBoundsArgs),
    /// Cluster boundary-delimited segments into subword units.
    Segclust(stages::SegclustArgs),
    /// Train the multi-task bottleneck network.
    MtlTrain(stages::MtlTrainArgs),
    /// Train the bottleneck network against a speaker adversary.
    AdvTrain(stages::AdvTrainArgs),
    /// Extract bottleneck features with a trained network.
    ExtractBnf(stages::ExtractBnfArgs),
    /// Score frame labels against the reference alignment.
    EvalPurity(stages::EvalPurityArgs),
    /// Measure unit-to-phone distances in posterior space.
    EvalKl(stages::EvalKlArgs),
    /// Run the minimal-pair discrimination test.
    EvalAbx(stages::EvalAbxArgs),
    /// Run configured stages end to end into one directory.
    Pipeline(stages::PipelineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::Features(_) => "features",
            Command::Dpgmm(_) => "dpgmm",
            Command::FilterLabels(_) => "filter-labels",
            Command::Collapse(_) => "collapse",
            Command::FuseBounds(_) => "fuse-bounds",
            Command::Segclust(_) => "segclust",
            Command::MtlTrain(_) => "mtl-train",
            Command::AdvTrain(_) => "adv-train",
            Command::ExtractBnf(_) => "extract-bnf",
            Command::EvalPurity(_) => "eval-purity",
            Command::EvalKl(_) => "eval-kl",
            Command::EvalAbx(_) => "eval-abx",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

/// Log level from ZEROSEG_LOG: quiet, info (default) or debug.
fn init_logging() {
    let level = match std::env::var("ZEROSEG_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("unknown ZEROSEG_LOG level {other:?}, using info");
            log::LevelFilter::Info
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

/// Manifest path next to a stage's primary output.
fn manifest_sibling(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn finish(path: PathBuf, record: StageRecord) -> Result<()> {
    let mut manifest = Manifest::new(record.name.clone());
    manifest.push(record);
    manifest.write(&path)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(args) => {
            finish(args.out.join("manifest.txt"), stages::gen_corpus(args)?)
        }
        Command::Features(args) => {
            finish(manifest_sibling(&args.out), stages::features_stage(args)?)
        }
        Command::Dpgmm(args) => finish(manifest_sibling(&args.model), stages::dpgmm_stage(args)?),
        Command::FilterLabels(args) => finish(
            manifest_sibling(&args.out),
            stages::filter_labels_stage(args)?,
        ),
        Command::Collapse(args) => {
            finish(manifest_sibling(&args.out), stages::collapse_stage(args)?)
        }
        Command::FuseBounds(args) => finish(
            manifest_sibling(&args.out),
            stages::fuse_bounds_stage(args)?,
        ),
        Command::Segclust(args) => finish(
            manifest_sibling(&args.labels),
            stages::segclust_stage(args)?,
        ),
        Command::MtlTrain(args) => {
            finish(manifest_sibling(&args.out), stages::mtl_train_stage(args)?)
        }
        Command::AdvTrain(args) => {
            finish(manifest_sibling(&args.out), stages::adv_train_stage(args)?)
        }
        Command::ExtractBnf(args) => finish(
            manifest_sibling(&args.out),
            stages::extract_bnf_stage(args)?,
        ),
        Command::EvalPurity(args) => finish(
            manifest_sibling(&args.report),
            stages::eval_purity_stage(args)?,
        ),
        Command::EvalKl(args) => {
            finish(manifest_sibling(&args.report), stages::eval_kl_stage(args)?)
        }
        Command::EvalAbx(args) => finish(
            manifest_sibling(&args.report),
            stages::eval_abx_stage(args)?,
        ),
        Command::Pipeline(args) => stages::pipeline(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let name = cli.command.name();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stage {name} failed: {e}");
            ExitCode::from(1)
        }
    }
}
