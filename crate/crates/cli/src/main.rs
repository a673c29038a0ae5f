use std::process::ExitCode;

use clap::Parser;
use dooly_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dooly: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
