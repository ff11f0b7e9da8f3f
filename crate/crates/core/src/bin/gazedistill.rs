use std::process::ExitCode;

use gaze_distill::cli::{execute, init_threads, parse_cli};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let run = || -> Result<String, gaze_distill::cli::CliError> {
        init_threads()?;
        let inv = parse_cli(&args)?;
        execute(&inv)
    };
    match run() {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gazedistill: {e}");
            ExitCode::FAILURE
        }
    }
}
