use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match ablscope::cli::run(ablscope::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
