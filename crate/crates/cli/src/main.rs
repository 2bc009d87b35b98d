//! `coffee`: one binary driving the whole pipeline. Every command reads its
//! inputs from flags and files, writes into `--out`, and exits with
//! 0 (success), 1 (usage), 2 (bad data or config) or 3 (internal failure).

mod commands;
mod error;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "coffee", version, about = "Event-sequence CTR lab: worlds, training, sweeps, attention reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Root seed; named substreams are split from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Must not exist (or be empty) unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Where a command gets its events and labelled requests.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// World file written by `gen-world`.
    #[arg(long)]
    pub world: PathBuf,
    /// Event log; simulated from the world's seed when absent.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Labelled requests; simulated from the world's seed when absent.
    #[arg(long)]
    pub examples: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world (users, content and ad catalogs).
    GenWorld {
        #[command(flatten)]
        common: Common,
        /// World settings as TOML; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate event logs and labelled ad requests for a world.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// World file written by `gen-world`.
        #[arg(long)]
        world: PathBuf,
    },
    /// Append k-NN embedding attributes to ad-impression events.
    Enrich {
        #[command(flatten)]
        common: Common,
        /// World file written by `gen-world`.
        #[arg(long)]
        world: PathBuf,
        /// Event log; simulated from the world's seed when absent.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Neighbours averaged per event.
        #[arg(long, default_value_t = coffee_core::enrichment::DEFAULT_K)]
        k: usize,
    },
    /// Train the sequence model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Model and training settings as TOML.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on its held-out users.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bootstrap resamples for the AUC interval.
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
    },
    /// Run a scaling sweep and write curves, ROI and saturation tables.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep manifest as TOML; defaults apply to missing keys.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Parallel training runs.
        #[arg(long)]
        workers: Option<usize>,
        /// Result cache; defaults to `<out>/cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Report the most attended history events for one request, plus the
    /// attention lift over sampled held-out requests.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// User to explain; the first held-out request is used when absent.
        #[arg(long, requires_all = ["ad", "ts"])]
        user: Option<usize>,
        /// Candidate ad for the explained request.
        #[arg(long, requires = "user")]
        ad: Option<usize>,
        /// Request timestamp (unix seconds).
        #[arg(long, requires = "user")]
        ts: Option<i64>,
        /// Events kept per source.
        #[arg(long, default_value_t = coffee_core::explain::DEFAULT_TOP_M)]
        top_m: usize,
        /// Held-out requests sampled for the lift; 0 skips it.
        #[arg(long, default_value_t = 1000)]
        lift_pairs: usize,
    },
    /// Re-render the tables and headline of a finished sweep.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory of a `sweep` run.
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenWorld { common, config } => commands::gen_world(&common, config.as_deref()),
        Command::Simulate { common, world } => commands::simulate(&common, &world),
        Command::Enrich { common, world, events, k } => commands::enrich(&common, &world, events.as_deref(), k),
        Command::Train { common, data, config } => commands::train(&common, &data, config.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            bootstrap,
        } => commands::eval(&common, &data, &checkpoint, bootstrap),
        Command::Sweep {
            common,
            manifest,
            workers,
            cache,
        } => commands::sweep(&common, manifest.as_deref(), workers, cache.as_deref()),
        Command::Explain {
            common,
            data,
            checkpoint,
            user,
            ad,
            ts,
            top_m,
            lift_pairs,
        } => {
            let request = user.map(|u| (u, ad.expect("clap enforces --ad"), ts.expect("clap enforces --ts")));
            commands::explain(&common, &data, &checkpoint, request, top_m, lift_pairs)
        }
        Command::Report { common, run } => commands::report(&common, &run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = std::panic::catch_unwind(|| run(cli));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(3),
    }
}
