use std::process::ExitCode;

use clap::Parser;
use slimq::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slimq: error: {e}");
            ExitCode::FAILURE
        }
    }
}
