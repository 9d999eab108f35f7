//! `nirom` command line.
//!
//! Exit status: 0 success, 2 configuration or argument error, 3 numerical
//! failure, 4 I/O or file-format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nirom_cli::{
    cmd_compare, cmd_decompose, cmd_fit, cmd_generate, cmd_predict, cmd_report, cmd_run, CliError, CliResult, Context,
    Method, PipelineConfig,
};

#[derive(Debug, Parser)]
#[command(name = "nirom", version, about = "POD-based reduced order model pipeline")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config and NIROM_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the input snapshots as SNP1.
    Generate,
    /// POD basis, latent trajectory and energy spectrum.
    Decompose,
    /// Fit one method, or every configured method.
    Fit {
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Reconstructed snapshots on the prediction grid.
    Predict {
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Model file; its kind is read from the file header.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// RMSE of predictions against the reference as CSV and JSON.
    Compare {
        /// Reference snapshots; synthetic inputs are regenerated when absent.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Prediction files; defaults to each configured method's output.
        predictions: Vec<PathBuf>,
    },
    /// Summary table of the metrics file.
    Report,
    /// All stages in order.
    Run,
}

fn execute(cli: &Cli) -> CliResult<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let ctx = Context::new(PipelineConfig::load(path)?, cli.seed, cli.out.as_deref())?;
    match &cli.command {
        Command::Generate => {
            cmd_generate(&ctx)?;
        }
        Command::Decompose => {
            cmd_decompose(&ctx)?;
        }
        Command::Fit { method } => {
            for m in ctx.methods(*method)? {
                cmd_fit(&ctx, m)?;
            }
        }
        Command::Predict { method, model } => match model {
            Some(path) => {
                cmd_predict(&ctx, *method, Some(path))?;
            }
            None => {
                for m in ctx.methods(*method)? {
                    cmd_predict(&ctx, Some(m), None)?;
                }
            }
        },
        Command::Compare { truth, predictions } => {
            cmd_compare(&ctx, truth.as_deref(), predictions)?;
        }
        Command::Report => print!("{}", cmd_report(&ctx)?),
        Command::Run => {
            cmd_run(&ctx)?;
            print!("{}", cmd_report(&ctx)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
