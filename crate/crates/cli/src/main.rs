use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradsense_cli::config::{parse_config, MethodChoice};
use gradsense_cli::{commands, exit_codes, CliError};

/// Gradient inversion attacks against batch-mean gradients, with a built-in
/// verifier for the combinatorial rescaling bound.
#[derive(Parser)]
#[command(name = "gradsense", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run attack experiments from a config file and write reports.
    Attack {
        /// Flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one or more methods (magia, dlg); overrides the config.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Restrict to one or more seeds; overrides the config.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeatable key=value override applied after the config file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Check the combinatorial bound chain and coefficient identity.
    Verify {
        /// Upper batch size for the exact coefficient identity (max 64).
        #[arg(long, default_value_t = 64)]
        b_max: usize,
        /// Randomized trials for the tightness and triangle-step checks.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Where to write the machine-readable report.
        #[arg(long, default_value = "verify_report.json")]
        report: PathBuf,
    },
    /// Compare per-iteration wall time of the two methods at one config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Iterations to average over.
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        /// Seed for the model, batch, and both runs.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "set")]
        set: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Attack { config, methods, seeds, out, set } => {
            let mut experiment = parse_config(&config, &set)?;
            if !methods.is_empty() {
                experiment.methods = methods
                    .iter()
                    .map(|m| MethodChoice::parse(m))
                    .collect::<Result<Vec<_>, _>>()?;
            }
            if !seeds.is_empty() {
                experiment.seeds = seeds;
            }
            if let Some(out) = out {
                experiment.out = out;
            }
            commands::run_attack(&experiment)?;
            Ok(())
        }
        Command::Verify { b_max, trials, seed, report } => commands::run_verify(b_max, trials, seed, &report),
        Command::Bench { config, iterations, seed, set } => {
            let experiment = parse_config(&config, &set)?;
            commands::run_bench(&experiment, iterations, seed)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::from(exit_codes::SUCCESS as u8),
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.exit_code as u8)
        }
    }
}
