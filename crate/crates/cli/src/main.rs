//! `msmamba`: train, evaluate, forecast, synthesize, gradient-check,
//! profile and sweep the multi-scale Mamba forecaster.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numeric abort,
//! 5 gradient check failure.

mod args;
mod commands;
mod flags;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;
use commands::Failure;

fn main() -> ExitCode {
    let argv = match flags::expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(Failure::Core(e)),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let reason = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[config]: {reason}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", f.line());
    ExitCode::from(f.exit_code())
}
