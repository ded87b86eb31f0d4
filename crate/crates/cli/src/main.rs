//! `flag-agg`: training runs, analyses and a key-agreement demo.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime
//! protocol error. Failures print one JSON object on stderr.

mod analyze;
mod keydemo;
mod train;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use flag_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "flag-agg",
    version,
    about = "Encrypted federated gradient aggregation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a training experiment described by a JSON config.
    Train {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a closed-form analysis, optionally with a Monte Carlo check.
    #[command(subcommand)]
    Analyze(analyze::Analysis),
    /// Run the N-of-N key-sum agreement once and verify it.
    Keydemo(keydemo::KeydemoArgs),
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: &'static str,
    field: Option<String>,
    message: String,
}

impl Failure {
    pub fn usage(field: &str, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    /// Errors raised before any protocol work starts.
    pub fn setup(e: Error) -> Self {
        let field = match &e {
            Error::Config { field, .. } => Some(field.clone()),
            _ => None,
        };
        let kind = match &e {
            Error::Config { .. } => "config",
            Error::Dataset(_) | Error::Io { .. } => "dataset",
            Error::Domain { .. } | Error::InvalidParams(_) => "domain",
            _ => "config",
        };
        let message = match &e {
            Error::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Self {
            code: 2,
            kind,
            field,
            message,
        }
    }

    /// Errors raised while running rounds or writing results.
    pub fn runtime(e: Error) -> Self {
        Self {
            code: 3,
            kind: "protocol",
            field: None,
            message: e.to_string(),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind,
                "field": self.field,
                "message": self.message,
                "exit_code": self.code,
            }
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = Failure {
                code: 2,
                kind: "usage",
                field: None,
                message: e
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim_start_matches("error: ")
                    .to_string(),
            };
            eprintln!("{}", f.to_json());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => train::run(&config, out),
        Command::Analyze(a) => analyze::run(a),
        Command::Keydemo(args) => keydemo::run(&args),
    };
    match result {
        Ok(output) => {
            let text = serde_json::to_string_pretty(&output).expect("output serializes");
            // a closed pipe (e.g. `| head`) is not an error of ours
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code)
        }
    }
}
