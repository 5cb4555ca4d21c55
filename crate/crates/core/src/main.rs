use std::process::ExitCode;

use clap::Parser;
use cropweed::cli::{error_line, execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(e.code().clamp(1, 255) as u8)
        }
    }
}
