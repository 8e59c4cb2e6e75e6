use clap::Parser;
use std::process::ExitCode;
use vsumm::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vsumm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
