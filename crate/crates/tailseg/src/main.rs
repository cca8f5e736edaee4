use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = tailseg::cli::Cli::parse();
    match tailseg::cli::execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind.code())
        }
    }
}
