//! Argument parsing and exit-code mapping for the `increlora` binary.
//!
//! Exit contract: 0 success, 1 verification failure, 2 unusable config or
//! arguments, 3 runtime failure (I/O, divergence). Logging goes to stderr,
//! controlled solely by INCRELORA_LOG; data outputs are files plus a short
//! summary on stdout.

pub mod artifacts;
pub mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::trainer::Mode;
use commands::CommandError;

#[derive(Parser)]
#[command(
    name = "increlora",
    version,
    about = "Incremental rank allocation for low-rank adapters on a small dense training stack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and archive its artifacts into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed; recorded in the resolved config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How many consecutive seeds to check, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Re-derive an archived run's allocation decisions from its logged
    /// score stream and compare with its event log.
    Replay {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train two configs on the identical task across consecutive seeds
    /// and summarize their final eval metrics.
    Compare {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the orthogonality penalty weight over {0, 0.01, 0.1, 1}.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an archived checkpoint on its run's own task.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Use checkpoint_best.bin instead of the final checkpoint.
        #[arg(long)]
        best: bool,
    },
    /// Write a ready-to-edit config for the standard heterogeneous fixture.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Emit the rank-matched fixed-rank baseline instead.
        #[arg(long)]
        fixed: bool,
    },
}

pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INCRELORA_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result: Result<(), CommandError> = match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&config, seed, &out),
        Command::CheckGrad { seed, seeds } => {
            if seeds == 0 {
                Err(CommandError::Config("--seeds must be at least 1".into()))
            } else {
                commands::cmd_check_grad(seed, seeds)
            }
        }
        Command::Replay { run } => commands::cmd_replay(&run),
        Command::Compare { config_a, config_b, seeds, out } => {
            commands::cmd_compare(&config_a, &config_b, seeds, &out).map(|_| ())
        }
        Command::Ablate { config, out } => commands::cmd_ablate(&config, &out),
        Command::Eval { run, best } => commands::cmd_eval(&run, best),
        Command::InitConfig { out, fixed } => {
            let mode = if fixed { Mode::FixedLora } else { Mode::Increlora };
            commands::cmd_init_config(&out, mode)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
