mod args;
mod brute;
mod config;
mod loop_cmd;
mod mock_serve;
mod output;
mod pairs_cmd;
mod stats_cmd;
mod store_cmd;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

fn run(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    let workdir = &cli.workdir;
    std::fs::create_dir_all(workdir)?;
    match &cli.command {
        Command::Brute(a) => brute::run(workdir, argv, a),
        Command::Pairs(a) => pairs_cmd::run(workdir, argv, a),
        Command::Loop(a) => loop_cmd::run(workdir, argv, a),
        Command::Stats(a) => stats_cmd::run(workdir, a),
        Command::Export(a) => store_cmd::export(workdir, argv, a),
        Command::Import(a) => store_cmd::import(workdir, argv, a),
        Command::MockServe(a) => mock_serve::run(a),
    }
}

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let hint = config::workdir_hint(&raw);
    let argv = match config::expand(raw, hint.as_deref()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &output::redact_argv(&argv)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            log::debug!("{} failed: {e:?}", cli.command.name());
            ExitCode::from(1)
        }
    }
}
