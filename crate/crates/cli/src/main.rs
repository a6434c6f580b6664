mod commands;

use std::process::ExitCode;

use clap::Parser;
use clickvos_core::Error;
use clickvos_tensor::TensorError;

use commands::Cli;

/// Exit status for an error: 1 usage, 2 data, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        Error::Diverged { .. } | Error::Tensor(TensorError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
