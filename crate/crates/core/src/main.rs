use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neuroclamp::experiment::{self, ExperimentConfig, ExperimentError, RunOptions};
use neuroclamp::signals;

#[derive(Parser)]
#[command(
    name = "neuroclamp",
    version,
    about = "Closed-loop identification of conductance-based neuron models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace the configured seed list, e.g. `--seeds 1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, estimate and write per-seed and aggregate reports.
    Identify {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Step-response contraction probe.
    Probe {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Feedback-gain lower bounds.
    Gainbound {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-check a trajectory file against the configured model.
    Verify {
        trajectory: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load(path: &Path, common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            return Err(ExperimentError::Config("--seeds is empty".into()));
        }
        cfg.experiment.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Identify { config, common } => {
            let cfg = load(&config, &common)?;
            let opts = RunOptions {
                out: Some(common.out.clone()),
                jobs: common.jobs,
            };
            let summary = experiment::run_identification(&cfg, &opts)?;
            print!("{}", summary.to_text());
            println!(
                "mean SNR {} dB; reports in {}",
                signals::format_db(summary.mean_snr_db),
                common.out.display()
            );
            Ok(true)
        }
        Command::Probe { config, common } => {
            let cfg = load(&config, &common)?;
            let report = experiment::run_contraction_probe(&cfg, Some(&common.out))?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::Gainbound { config, common } => {
            let cfg = load(&config, &common)?;
            for (name, report) in experiment::run_gain_bound(&cfg, Some(&common.out))? {
                println!("[{name}]");
                print!("{}", report.to_text());
            }
            Ok(true)
        }
        Command::Verify {
            trajectory,
            config,
            common,
        } => {
            let cfg = load(&config, &common)?;
            let report = experiment::verify(&trajectory, &cfg)?;
            print!("{}", report.to_text());
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
