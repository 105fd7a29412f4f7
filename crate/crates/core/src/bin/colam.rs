use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = colam::cli::Cli::parse();
    match colam::cli::run(cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
