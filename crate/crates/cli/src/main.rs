use std::process::ExitCode;

use clap::Parser;
use kvm_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
