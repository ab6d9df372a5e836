//! Command line harness for adversarial mixup training.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Exit codes: 0 success, 2 configuration or shape errors, 3 training
/// divergence, 4 i/o failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Io(String),
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<admix::trainer::TrainError> for CliError {
    fn from(e: admix::trainer::TrainError) -> Self {
        use admix::trainer::TrainError as T;
        match e {
            T::Diverged { .. } => CliError::Divergence(e.to_string()),
            T::Config(c) => CliError::Config(c.to_string()),
            T::Data(admix::data::DataError::Io { .. }) => CliError::Io(e.to_string()),
            T::Checkpoint(admix::model::checkpoint::CheckpointError::Io(_)) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<admix::diffmath::DiffError> for CliError {
    fn from(e: admix::diffmath::DiffError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<admix::data::DataError> for CliError {
    fn from(e: admix::data::DataError) -> Self {
        match e {
            admix::data::DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<admix::model::checkpoint::CheckpointError> for CliError {
    fn from(e: admix::model::checkpoint::CheckpointError) -> Self {
        match e {
            admix::model::checkpoint::CheckpointError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "admix",
    about = "Adversarial mixup augmentation: train, evaluate, export mixed samples, self-test",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Missing file means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the training and data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Field overrides as dotted key=value, e.g. train.alpha=0.4.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::ResolvedRun, CliError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
            None => String::new(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
            overrides.push(format!("data.seed={seed}"));
        }
        // manifests are valid configs: their [run] section is identity, not
        // configuration, so it is dropped before parsing
        config::parse_manifest_config(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the manifest, log, and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to $ADMIX_OUT_ROOT/<run-id> or ./runs/<run-id>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated metrics: top1, top5, ece, fgsm, occlusion.
        #[arg(long, default_value = "top1,top5,ece,fgsm,occlusion")]
        metrics: String,
        /// Attack strength; defaults to 8/255.
        #[arg(long)]
        fgsm_eps: Option<f64>,
        #[arg(long, default_value_t = 15)]
        ece_bins: usize,
        /// Square occlusion patch edge.
        #[arg(long, default_value_t = 16)]
        occlusion_patch: usize,
        /// Comma-separated occlusion ratios in [0, 1].
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0")]
        occlusion_ratios: String,
        /// Where to write eval.csv; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export source images, policy mask heatmaps, and mixed images as PNG.
    ExportMixed {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of mix sets to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// "random" or "fixed:0.5,0.3,0.2".
        #[arg(long, default_value = "random")]
        lambda: String,
    },
    /// Run the property suites and print one line per check.
    Selftest {
        /// Seeds for the gradient batteries.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => commands::train::run(&config.load()?, out),
        Command::Eval {
            config,
            checkpoint,
            metrics,
            fgsm_eps,
            ece_bins,
            occlusion_patch,
            occlusion_ratios,
            out,
        } => commands::eval::run(
            &config.load()?,
            &checkpoint,
            &metrics,
            fgsm_eps,
            ece_bins,
            occlusion_patch,
            &occlusion_ratios,
            out,
        ),
        Command::ExportMixed { config, checkpoint, out, count, lambda } => {
            commands::export::run(&config.load()?, &checkpoint, &out, count, &lambda)
        }
        Command::Selftest { seeds } => commands::selftest::run(seeds),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
