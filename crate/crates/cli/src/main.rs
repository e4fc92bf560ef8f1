//! `lext`: data generation, training, evaluation, ablation, attention
//! export and plotting for onset-prompted target speaker extraction.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use serde_json::json;

pub use commands::Cli;

/// Failure classes and their exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Runtime,
    Usage,
    Config,
}

impl ErrorKind {
    fn code(self) -> u8 {
        match self {
            ErrorKind::Runtime => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Runtime => "runtime",
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: msg.into() }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        json!({ "error": { "kind": self.kind.name(), "code": self.kind.code(), "message": self.message } }).to_string()
    }
}

impl From<lext::Error> for CliError {
    fn from(e: lext::Error) -> Self {
        match e {
            lext::Error::Config(_) => CliError::config(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

/// Every long flag of every subcommand, for the top-level help text.
fn flag_index(cmd: &clap::Command) -> String {
    let mut out = String::from("Flags by command:\n");
    for sub in cmd.get_subcommands() {
        let flags: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
        out.push_str(&format!("  {:<12} {}\n", sub.get_name(), flags.join(" ")));
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cmd = Cli::command();
    let index = flag_index(&cmd);
    let matches = match cmd.after_help(index).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).record());
            return ExitCode::from(ErrorKind::Usage.code());
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let result = Cli::from_arg_matches(&matches).map_err(|e| CliError::usage(e.to_string())).and_then(|cli| cli.run(argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            eprintln!("{}", e.record());
            ExitCode::from(e.kind.code())
        }
    }
}
