use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = relcap_cli::Cli::parse();
    match relcap_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
