use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match petseg::cli::run(petseg::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
