//! `fcmlab`: simulate, fit, diagnose and down-sample functional convolution
//! designs, and reproduce the acceptance experiments.
//!
//! Exit codes: 0 success, 1 I/O error, 2 validation error, 3 near-singular
//! Gram system (without `--allow-rank-deficient`), 4 a reproduced experiment
//! failed. Errors are reported as one JSON object on standard error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use config::{Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report(&CliError::Usage(e.to_string()));
            return ExitCode::from(2);
        }
    };
    if let Err(e) = config::init_threads() {
        report(&e);
        return ExitCode::from(e.exit_code());
    }
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report(e: &CliError) {
    let mut body = json!({
        "format_version": fcm_core::manifest::FORMAT_VERSION,
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
        }
    });
    if let CliError::Core(fcm_core::FcmError::Csv { path, line, .. }) = e {
        body["error"]["path"] = json!(path);
        body["error"]["line"] = json!(line);
    }
    eprintln!("{body}");
}
