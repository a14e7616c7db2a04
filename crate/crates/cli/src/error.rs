use std::path::PathBuf;

use thiserror::Error;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<calib2stage::Error> for CliError {
    fn from(e: calib2stage::Error) -> Self {
        use calib2stage::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Contract(_) => CliError::Config(msg),
            E::NonFinite(_) => CliError::Numeric(msg),
            E::Data(_) | E::Parse { .. } | E::Dimension { .. } | E::Io { .. } | E::Json(_) => CliError::Data(msg),
        }
    }
}

/// Wraps a core error with the file it concerns.
pub fn at(path: &PathBuf) -> impl FnOnce(calib2stage::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        CliError::Numeric(m) => CliError::Numeric(format!("{}: {m}", path.display())),
    }
}
