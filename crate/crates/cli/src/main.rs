use std::process::ExitCode;

use clap::Parser;
use epigam_cli::commands::{run, Cli};
use epigam_cli::{thread_count, CliError};

fn fail(e: &CliError, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::to_string_pretty(&e.to_json()).expect("serializable error"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = match thread_count() {
        Ok(n) => n,
        Err(e) => return fail(&e, 2),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        return fail(&CliError::Pipeline(e.to_string()), 1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => fail(&e, 2),
        Err(e) => fail(&e, 1),
    }
}
