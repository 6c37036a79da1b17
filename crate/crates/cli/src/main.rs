use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use qflux_cli::{commands, config, CliError, Overrides};

/// Quantum probability flux and first-exit statistics laboratory.
#[derive(Parser)]
#[command(name = "qflux", version, about)]
struct Args {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "qflux.cfg")]
    config: PathBuf,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the ensemble seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thread budget (performance only, never results). 0 = default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Propagate the configured state and write frame checkpoints.
    Evolve,
    /// Boundary flux series through the region surface.
    Flux,
    /// Exit-time statistics: flux density, trajectory ensemble, comparison.
    ExitStats {
        /// flux | ensemble | both
        #[arg(long, default_value = "both")]
        method: String,
    },
    /// Scan the boundary current for positivity violations.
    CpcCheck,
    /// Flux-across-surfaces table over a list of radii.
    VerifyFast {
        /// Comma-separated radii overriding the config.
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
    },
    /// Draw positions from the quantum equilibrium density.
    Sample,
    /// Integrate and dump individual trajectories.
    Trajectories,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)?;
    let cfg = config::parse_raw(&text)?;
    let command = match &args.command {
        CliCommand::Evolve => commands::Command::Evolve,
        CliCommand::Flux => commands::Command::Flux,
        CliCommand::ExitStats { method } => commands::Command::ExitStats {
            method: match method.as_str() {
                "flux" => commands::ExitMethod::Flux,
                "ensemble" => commands::ExitMethod::Ensemble,
                "both" => commands::ExitMethod::Both,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown exit-stats method `{other}` (flux | ensemble | both)"
                    )))
                }
            },
        },
        CliCommand::CpcCheck => commands::Command::CpcCheck,
        CliCommand::VerifyFast { radii } => commands::Command::VerifyFast {
            radii: radii.clone(),
        },
        CliCommand::Sample => commands::Command::Sample,
        CliCommand::Trajectories => commands::Command::Trajectories,
    };
    let overrides = Overrides {
        seed: args.seed,
        threads: args.threads,
    };
    commands::run(&command, &cfg, &args.out, &overrides)?;
    Ok(())
}
