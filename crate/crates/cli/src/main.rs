//! Command-line driver: stage subcommands over an experiment config, each
//! reading and writing files under the output directory so that stages
//! can be re-run independently.
//!
//! Exit codes: 0 success, 2 config error, 3 hypothesis failure,
//! 4 solver nonconvergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfturnpike_core::config::ExperimentConfig;
use mfturnpike_core::pipeline;

#[derive(Parser)]
#[command(
    name = "mfturnpike",
    about = "Mean-field optimal control laboratory: static solves, decay certificates, dynamic solves and turnpike reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "experiment.json")]
    config: PathBuf,

    /// Output directory for stage artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Prints progress information to stderr.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Samples the model hypotheses (affinity, convexity, derivatives).
    Validate,
    /// Solves the static problem and writes the stationary triple.
    SolveStatic,
    /// Assembles the Hessian at the stored triple and runs the decay
    /// certification chain.
    Riccati,
    /// Solves the finite-horizon problem from the configured ensemble.
    SolveDynamic,
    /// Builds the turnpike report from the stored stage outputs.
    TurnpikeReport,
    /// Runs the full stage sequence.
    Run,
}

fn execute(cli: &Cli) -> mfturnpike_core::Result<()> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.validate()?;
    }
    let say = |msg: &str| {
        if cli.verbose {
            eprintln!("mfturnpike: {msg}");
        }
    };
    match cli.command {
        Command::Validate => {
            let report = pipeline::stage_validate(&config, &cli.out)?;
            say(&format!(
                "hypotheses pass: affinity {:.3e}, min control curvature {:.3e}",
                report.affinity_residual, report.min_uu_eigenvalue
            ));
        }
        Command::SolveStatic => {
            let triple = pipeline::stage_solve_static(&config, &cli.out)?;
            say(&format!(
                "stationary residual {:.3e} after {} iterations",
                triple.residual_norm, triple.iterations
            ));
        }
        Command::Riccati => {
            let cert = pipeline::stage_riccati(&config, &cli.out)?;
            say(&format!(
                "decay rate {:.6} with transient bound {:.3}",
                cert.beta, cert.m_const
            ));
        }
        Command::SolveDynamic => {
            let traj = pipeline::stage_solve_dynamic(&config, &cli.out)?;
            say(&format!(
                "cost {:.6e} after {} sweeps (residual {:.3e})",
                traj.cost, traj.sweeps, traj.pmp_residual
            ));
        }
        Command::TurnpikeReport => {
            let report = pipeline::stage_turnpike_report(&config, &cli.out)?;
            say(&format!(
                "fitted rate {:.4} (envelope constant {:.3})",
                report.lagrangian_fit.alpha, report.lagrangian_fit.c
            ));
        }
        Command::Run => {
            pipeline::run_pipeline(&config, &cli.out)?;
            say("pipeline complete");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("mfturnpike: error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
