use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = megloc_cli::Cli::parse();
    match megloc_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("megloc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
