use std::process::ExitCode;

use clap::Parser;
use selfnpo::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", summary.manifest_path.display());
            if summary.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("validation failed; see the report next to the manifest");
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                selfnpo::Error::Configuration(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
