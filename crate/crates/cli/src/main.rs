mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;

/// Everything that ends a command early.
#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Usage(String),
    Core(dfkit::Error),
    /// A verification suite ran but did not pass.
    Check(String),
}

impl From<dfkit::Error> for CliError {
    fn from(e: dfkit::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// Exit code and a short machine-readable kind.
    fn code(&self) -> (u8, &'static str) {
        use dfkit::Error as E;
        match self {
            CliError::Clap(_) | CliError::Usage(_) => (2, "usage"),
            CliError::Check(_) => (4, "check"),
            CliError::Core(e) => match e {
                E::Config(_) => (2, "usage"),
                E::Data(_) | E::Io(_) | E::Json(_) => (3, "data"),
                E::Shape(_) | E::NotPositiveDefinite { .. } | E::Numeric(_) | E::Contract(_) => (4, "numeric"),
                E::Divergence(_) => (5, "divergence"),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Clap(e) => {
                let text = e.to_string();
                let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                first.trim_start_matches("error: ").to_string()
            }
            CliError::Usage(m) | CliError::Check(m) => m.clone(),
            CliError::Core(dfkit::Error::Data(m) | dfkit::Error::Config(m) | dfkit::Error::Numeric(m)) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(CliError::Clap(e)) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(e),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

/// Prints `E<code> <kind>: <message>` on one line and returns the code.
fn report(e: CliError) -> ExitCode {
    let (code, kind) = e.code();
    let msg = e.message().split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("E{code} {kind}: {msg}");
    ExitCode::from(code)
}
