use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saff_cli::commands;
use saff_cli::config::Split;
use saff_cli::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "saff", version, about = "Backprop-free forward-forward training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.layer_iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use the full dense reference setup instead of the desk-scale one.
    #[arg(long)]
    full: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.overrides)?;
        if self.full {
            cfg.apply_full();
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network layer by layer and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write.
        #[arg(short, long)]
        output: PathBuf,
        /// Directory for report.json, traces.csv and selection.json.
        #[arg(long, default_value = ".")]
        report_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a data split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate (overrides eval.split).
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Also write the metrics to this file.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score the warm-up candidates and record the selection.
    Warmup {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = ".")]
        report_dir: PathBuf,
    },
    /// Mask the smallest weights of every layer.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fraction of each layer's weights to mask.
        #[arg(long)]
        ratio: f64,
        /// Output checkpoint (defaults to overwriting the input).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Config whose data and training settings drive retraining.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Steps per layer of retraining with the mask fixed.
        #[arg(long, default_value_t = 0, requires = "config")]
        retrain: usize,
    },
    /// Train an encoder with the configured objective, then freeze it.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = ".")]
        report_dir: PathBuf,
    },
    /// Train a head on a frozen encoder.
    Head {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = ".")]
        report_dir: PathBuf,
    },
    /// Describe a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train { cfg, output, report_dir } => commands::train(&cfg.load()?, &output, &report_dir),
        Command::Eval { cfg, checkpoint, split, output } => {
            let mut c = cfg.load()?;
            if let Some(s) = split {
                c.eval.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                };
            }
            let v = commands::eval(&c, &checkpoint)?;
            commands::save_json(output.as_deref(), &v)?;
            Ok(v)
        }
        Command::Warmup { cfg, report_dir } => commands::warmup(&cfg.load()?, &report_dir),
        Command::Prune { checkpoint, ratio, output, config, overrides, retrain } => {
            let cfg = config.map(|p| ExperimentConfig::load(&p, &overrides)).transpose()?;
            let output = output.unwrap_or_else(|| checkpoint.clone());
            commands::prune(&checkpoint, ratio, &output, cfg.as_ref().map(|c| (c, retrain)))
        }
        Command::Pretrain { cfg, output, report_dir } => commands::pretrain(&cfg.load()?, &output, &report_dir),
        Command::Head { cfg, encoder, output, report_dir } => {
            commands::head(&cfg.load()?, &encoder, &output, &report_dir)
        }
        Command::Report { checkpoint } => commands::report(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("json serializes");
            // a closed pipe (e.g. `| head`) is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
