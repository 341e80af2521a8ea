use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands;
use crate::config::{Preset, RunConfig};

/// Probabilistic remaining-useful-life prediction with LSTM deep ensembles.
///
/// Every command reads one resolved configuration: the preset, then
/// `--config`, then `--set` overrides, then the flags below.
#[derive(Parser, Debug)]
#[command(name = "rulens", version, about, long_about = None)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML config file layered over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Built-in starting point.
    #[arg(long, global = true, value_enum, default_value = "paper")]
    pub preset: Preset,

    /// Override one config value, e.g. `--set training.max_epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Run directory (config `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Ensemble size (config `ensemble.members`).
    #[arg(long, global = true)]
    pub members: Option<usize>,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Keep already trained members of an interrupted `train`.
    #[arg(long, global = true)]
    pub resume: bool,

    /// Members trained concurrently; 0 uses every core (config `ensemble.threads`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse, normalize and window CMAPSS files into a dataset archive.
    Ingest {
        /// Training file, e.g. train_FD001.txt (config `data.train`).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test file (config `data.test`).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Ground-truth RUL file for the test units (config `data.rul`).
        #[arg(long)]
        rul: Option<PathBuf>,
        /// Archive directory [default: <out>/dataset].
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Train the ensemble on an archive.
    Train {
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Checkpoint directory [default: <out>/checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the archive's test units: RMSE, score, PICP, NMPIW.
    Evaluate {
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aleatoric and epistemic uncertainty profiles and densities per test set.
    Uncertainty {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Raw CMAPSS test file as NAME=PATH, repeatable. Normalized with the
        /// checkpoint's training statistics. Without it the archive's test
        /// units are used.
        #[arg(long = "test", value_name = "NAME=PATH")]
        tests: Vec<String>,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// One sample per sliding window instead of one per unit.
        #[arg(long)]
        per_window: bool,
    },
    /// Per-cycle prediction trace with interval bands for one unit.
    Predict {
        #[arg(long)]
        unit: u32,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Test,
    Train,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::Train => "train",
        }
    }
}

impl GlobalArgs {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut config = RunConfig::resolve(self.preset, self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        if let Some(m) = self.members {
            config.ensemble.members = m;
        }
        if let Some(t) = self.threads {
            config.ensemble.threads = t;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn log_level(&self) -> log::LevelFilter {
        match (self.quiet, self.verbose) {
            (true, _) => log::LevelFilter::Warn,
            (_, 0) => log::LevelFilter::Info,
            (_, 1) => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.global.resolve_config()?;
    let ctx = commands::Context {
        config,
        force: cli.global.force,
        resume: cli.global.resume,
    };
    match cli.command {
        Command::Ingest { train, test, rul, archive } => commands::ingest(&ctx, train, test, rul, archive),
        Command::Train { archive, checkpoint } => commands::train(&ctx, archive, checkpoint),
        Command::Evaluate { archive, checkpoint } => commands::evaluate(&ctx, archive, checkpoint),
        Command::Uncertainty {
            checkpoint,
            tests,
            archive,
            per_window,
        } => commands::uncertainty(&ctx, checkpoint, &tests, archive, per_window),
        Command::Predict {
            unit,
            split,
            archive,
            checkpoint,
        } => commands::predict(&ctx, unit, split, archive, checkpoint),
        Command::ShowConfig => {
            print!("{}", ctx.config.to_toml());
            Ok(())
        }
    }
}
