use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hpbm_cli::config::{ExperimentConfig, SelectionArg};
use hpbm_cli::pipeline::{cmd_calibrate, cmd_run, cmd_synth};
use hpbm_cli::report::cmd_report;

#[derive(Parser)]
#[command(name = "hpbm", about = "Hybrid soil-moisture modelling experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace every trained corrector with the zero function.
    #[arg(long)]
    ablate_corrector: bool,
    /// Override the config's selection policy.
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.ablate_corrector {
            cfg.training.ablate_corrector = true;
        }
        if let Some(sel) = self.selection {
            cfg.training.selection = sel;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic site records from the built-in weather model.
    Synth(RunArgs),
    /// Calibrate the bucket model against each site's full record.
    Calibrate(RunArgs),
    /// Run the leave-one-year-out experiment and write a report directory.
    Run(RunArgs),
    /// Print the summary table of a completed run directory.
    Report {
        /// Directory written by `hpbm run`.
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => args.load().and_then(|cfg| cmd_synth(&cfg)),
        Command::Calibrate(args) => args.load().and_then(|cfg| cmd_calibrate(&cfg)),
        Command::Run(args) => args.load().and_then(|cfg| cmd_run(&cfg)),
        Command::Report { run_dir } => cmd_report(run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
