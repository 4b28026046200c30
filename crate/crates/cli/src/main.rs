use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reducedpinn::harness::{self, Command, ExperimentConfig, Overrides};
use reducedpinn::presets::PresetName;

#[derive(Parser, Debug)]
#[command(name = "reducedpinn", version, about = "Dimension-reduced value and safety estimation")]
struct Cli {
    /// TOML experiment config, or an artifact from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Preset to run when no config file is given.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<PresetName>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Sample trajectories of the full or reduced SDE.
    Simulate,
    /// Monte Carlo value estimates on the grid.
    EstimateValue,
    /// Monte Carlo safety probabilities on the grid.
    EstimateSafety,
    /// Finite-difference or closed-form solution on the grid.
    SolvePde,
    TrainPinn,
    /// Train the feature autoencoder.
    TrainFeatures,
    /// Error-versus-samples table against an oracle.
    Benchmark,
    /// PINN training data from FD, Monte Carlo, closed form or a file.
    MakeDataset,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::EstimateValue => Command::EstimateValue,
            Cmd::EstimateSafety => Command::EstimateSafety,
            Cmd::SolvePde => Command::SolvePde,
            Cmd::TrainPinn => Command::TrainPinn,
            Cmd::TrainFeatures => Command::TrainFeatures,
            Cmd::Benchmark => Command::Benchmark,
            Cmd::MakeDataset => Command::MakeDataset,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let cfg = match (&cli.config, cli.preset) {
        (Some(path), None) => ExperimentConfig::load(path),
        (None, Some(name)) => Ok(ExperimentConfig::preset(name)),
        (Some(_), Some(_)) => {
            eprintln!("error: give either --config or --preset, not both");
            return ExitCode::from(1);
        }
        (None, None) => {
            eprintln!("error: one of --config PATH or --preset NAME is required");
            return ExitCode::from(1);
        }
    };
    let result = cfg.and_then(|cfg| harness::run(cli.command.into(), cfg, &overrides));
    match result {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            for a in &summary.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
