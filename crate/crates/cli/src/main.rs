mod cli;
mod commands;
mod config;
mod error;
mod pngio;
mod rundir;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::rundir::RunDir;

fn run(cli: Cli) -> CliResult<()> {
    let run = RunDir::open(&cli.run_dir)?;
    let persisted = run.config_path();
    let mut files: Vec<&Path> = Vec::new();
    if persisted.exists() {
        files.push(&persisted);
    }
    if let Some(c) = &cli.config {
        files.push(c);
    }
    let mut cfg = RunConfig::layered(&files)?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&run, &mut cfg, a),
        Command::Train { target } => commands::train(&run, &mut cfg, target),
        Command::Sample(a) => commands::sample(&run, &mut cfg, a),
        Command::Eval(a) => commands::eval(&run, &mut cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
