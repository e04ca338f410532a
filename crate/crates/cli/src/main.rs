//! `agemap` — drives the volumetric age-mapping pipeline end to end:
//! synthetic cohort generation, 3D age regression, bias correction,
//! importance-map extraction, registration, group atlases, and reports.

mod config;
mod digest;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::error::{CliError, CliResult};
use crate::stages::Stage;

#[derive(Parser)]
#[command(
    name = "agemap",
    version,
    about = "Volumetric age mapping: phantom cohorts, a 3D age regressor, \
             importance maps, and population atlases",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 missing \
                  upstream artifact, 4 numerical failure.\nThe AGEMAP_OUT_ROOT \
                  environment variable overrides `output_root` (an explicit \
                  --set output_root=... wins)."
)]
struct Cli {
    /// JSON run configuration; every field has a default, unknown keys are
    /// rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted config override, repeatable (e.g. --set train.epochs=5).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    set: Vec<String>,

    /// Worker-thread cap for within-stage parallelism; 1 runs fully
    /// sequentially (bit-exact determinism guarantee).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort: volumes, ground-truth masks, manifest.
    Phantom,
    /// Train the 3D age regressor and write its checkpoint.
    Train,
    /// Fill raw age predictions for the validation and test splits.
    Predict,
    /// Fit the linear age bias on the validation split and write corrected
    /// predictions.
    Bias,
    /// Extract a normalized importance volume per test subject.
    Cam,
    /// Register group members to their atlas targets (cached transforms).
    Register,
    /// Build mean image + importance atlases for every grouping scheme.
    Atlas,
    /// Emit metric tables, scatter data, localization scores, the age-band
    /// spine trend, and overlay panels.
    Report,
    /// Train and evaluate the 2.5D projection baseline.
    Baseline25d,
    /// Run the full pipeline: phantom, train, predict, bias, cam, register,
    /// atlas, report.
    RunAll,
}

fn dispatch(cfg: &config::RunConfig, command: &Command) -> CliResult<()> {
    match command {
        Command::Phantom => stages::run(cfg, Stage::Phantom),
        Command::Train => stages::run(cfg, Stage::Train),
        Command::Predict => stages::run(cfg, Stage::Predict),
        Command::Bias => stages::run(cfg, Stage::Bias),
        Command::Cam => stages::run(cfg, Stage::Cam),
        Command::Register => stages::run(cfg, Stage::Register),
        Command::Atlas => stages::run(cfg, Stage::Atlas),
        Command::Report => stages::run(cfg, Stage::Report),
        Command::Baseline25d => stages::run(cfg, Stage::Baseline25d),
        Command::RunAll => stages::run_all(cfg),
    }
}

fn real_main(cli: &Cli) -> CliResult<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.jobs {
        None => dispatch(&cfg, &cli.command),
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot build a {n}-thread pool: {e}")))?;
            pool.install(|| dispatch(&cfg, &cli.command))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agemap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
