//! Experiment runner for the toy detector: config handling, file formats
//! and the `dhq` subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod io;

use clap::Parser;
use std::ffi::OsString;

/// Parses `args` (program name first) and runs the subcommand.
pub fn run(args: Vec<OsString>) -> anyhow::Result<()> {
    let (rest, overrides) = cli::split_overrides(args)?;
    let parsed = cli::Cli::try_parse_from(rest)?;
    match &parsed.command {
        cli::Command::GenData(a) => commands::gen_data(a, &overrides),
        cli::Command::Train(a) => commands::train_cmd(a, &overrides),
        cli::Command::Eval(a) => commands::eval_cmd(a, &overrides),
        cli::Command::Ablate(a) => commands::ablate(a, &overrides),
        cli::Command::Suppress(a) => commands::suppress_cmd(a, &overrides),
        cli::Command::Diagnose(a) => commands::diagnose(a, &overrides),
    }
}
