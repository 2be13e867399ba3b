use std::process::ExitCode;

use clap::Parser;
use sparsevos::cli::{execute, Cli};
use sparsevos::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already lead with their class.
            let msg = match &e {
                Error::Core(_) => e.to_string(),
                _ => format!("{}: {e}", e.class()),
            };
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
