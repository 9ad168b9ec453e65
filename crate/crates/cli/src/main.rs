//! `squeezelab` command-line driver.

mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use squeezelab::Error;

/// Exit status for an error: 2 for invalid input, 3 for numerical or
/// convergence failures, 4 for I/O failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::InvalidData(_)
        | Error::DimensionMismatch(_)
        | Error::Format(_) => 2,
        Error::Json(j) if j.is_io() => 4,
        Error::Json(_) => 2,
        Error::Csv(c) if c.is_io_error() => 4,
        Error::Csv(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("SQUEEZELAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::InvalidParameter(format!("SQUEEZELAB_THREADS must be a positive integer, got '{value}'"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    let outcome = configure_threads().and_then(|()| commands::run(cli));
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let report = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            let _ = writeln!(std::io::stderr(), "{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}
