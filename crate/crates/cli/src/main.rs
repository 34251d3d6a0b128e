use std::path::PathBuf;
use std::process::ExitCode;

use cdcl_cli::commands::{self, Context, Options};
use cdcl_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cdcl-lab",
    version,
    about = "Synthetic screening data, SSL training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (generator seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Batch rotation selecting the train/val/test split.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Output root.
    #[arg(long, global = true, env = "CDCL_LAB_OUT")]
    out: Option<PathBuf>,
    /// Parallel experiment cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Continue from existing checkpoints and finished cells.
    #[arg(long, global = true)]
    resume: bool,
    /// Stop training at this iteration, leaving a checkpoint.
    #[arg(long, global = true, hide = true)]
    stop_after: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate,
    /// Train one method on one fold.
    Train,
    /// Evaluate a trained run.
    Eval,
    /// Run the method × seed × fold × subset matrix.
    Experiment,
    /// Rebuild tables from a finished experiment.
    Report {
        /// Experiment directory; defaults to the one of `--config`.
        dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let opts = Options {
        config: c.config,
        seed: c.seed,
        fold: c.fold,
        out: c.out,
        workers: c.workers,
        resume: c.resume,
        stop_after: c.stop_after,
    };
    let ctx = Context::new(&opts)?;
    match cli.command {
        Command::Generate => commands::generate(&ctx).map(drop),
        Command::Train => commands::train(&ctx).map(drop),
        Command::Eval => commands::eval(&ctx).map(drop),
        Command::Experiment => commands::experiment(&ctx).map(drop),
        Command::Report { dir } => commands::report(&ctx, dir.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
