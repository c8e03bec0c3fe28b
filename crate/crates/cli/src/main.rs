use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use creditprint::config::RunConfig;
use creditprint::Error;

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Credit assessment from mobility footprints.
#[derive(Debug, Parser)]
#[command(name = "creditprint", version)]
struct Cli {
    /// Config file of key=value lines (see the key list below).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `out.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory; overrides `data.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to the output directory.
    Generate,
    /// Score regions and build the region graphs from training users.
    BuildGraphs,
    /// Train the region network and write region embeddings.
    TrainRen,
    /// Train the credit network on existing region embeddings.
    TrainTcan {
        /// Region embedding CSV; defaults to embeddings.csv in the output directory.
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
    },
    /// Train both networks and score the test users.
    Train,
    /// Test AUC of the full model, reusing scores.csv when present.
    Evaluate,
    /// Run the variant matrix over the configured seeds.
    Ablate {
        /// Also sweep region and trajectory embedding sizes.
        #[arg(long)]
        sweep: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::BuildGraphs => "build-graphs",
            Command::TrainRen => "train-ren",
            Command::TrainTcan { .. } => "train-tcan",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Error tagged with the stage it came from.
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

pub trait At<T> {
    fn at(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> At<T> for creditprint::Result<T> {
    fn at(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_IO: u8 = 5;

fn exit_code(f: &Failure) -> u8 {
    match &f.error {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        // anything unreadable while loading the dataset is a data problem
        Error::Io { .. } | Error::Json { .. } if f.stage == "ingest" => EXIT_DATA,
        Error::Io { .. } | Error::Json { .. } => EXIT_IO,
        _ => EXIT_DATA,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).at("config")?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data_dir = d.clone();
    }
    if let Command::Ablate { sweep: true } = cli.command {
        cfg.sweep = true;
    }
    cfg.validate().at("config")?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(RunConfig::help_text());
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = resolve(&cli).and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("creditprint {}: {} stage failed: {}", cli.command.name(), f.stage, f.error);
            ExitCode::from(exit_code(&f))
        }
    }
}
