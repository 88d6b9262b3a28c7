use std::process::ExitCode;

use clap::Parser;
use recolor_cli::commands::{run, Cli};

fn main() -> ExitCode {
    // Argument errors exit with status 2 from inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(1)
        }
    }
}
