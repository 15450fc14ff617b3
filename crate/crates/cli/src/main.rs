//! `derm-foundry`: one subcommand per pipeline.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 runtime
//! failure, 64 unknown or missing subcommand.

mod args;
mod commands;
mod config;
mod error;
mod rundir;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;
use crate::error::CliError;

pub const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return parse_failure(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("derm-foundry: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_failure(e: clap::Error) -> ExitCode {
    let code = match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
        ErrorKind::InvalidSubcommand
        | ErrorKind::MissingSubcommand
        | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
        _ => 2,
    };
    // Printing can only fail on a closed stream; the exit code still reports.
    let _ = e.print();
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let task = cli.command.task();
    let env: Vec<(String, String)> = std::env::vars().collect();
    let cfg = config::resolve(task, &cli.global, &cli.command.overrides(), &env)?;
    let run_dir = rundir::RunDir::create(&cfg.output_dir)?;
    rundir::init_logging(&run_dir, cli.global.log_level)?;
    run_dir.write_config(&cfg)?;
    log::info!("{} run in {} (seed {})", task.name(), run_dir.root.display(), cfg.seed);
    commands::dispatch(&cfg, &run_dir)?;
    log::info!("{} finished", task.name());
    Ok(())
}
