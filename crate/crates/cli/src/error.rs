use std::fmt;

use megloc::forward::Fingerprint;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Files built from different lead fields or format versions (exit 3).
    Compatibility(String),
    /// Numerical breakdown (exit 4).
    Numeric(String),
    /// Anything else, typically I/O (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compatibility(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn fingerprint_mismatch(what: &str, expected: &Fingerprint, found: &Fingerprint) -> Self {
        CliError::Compatibility(format!(
            "{what} was built for a different lead field\n  lead field: {expected}\n  {what}: {found}"
        ))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Compatibility(m) => write!(f, "compatibility error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<megloc::Error> for CliError {
    fn from(e: megloc::Error) -> Self {
        use megloc::Error as E;
        let msg = e.to_string();
        let root = match &e {
            E::Training { source, .. } => source.as_ref(),
            other => other,
        };
        match root {
            E::InvalidArgument(_) => CliError::Config(msg),
            E::Version { .. } => CliError::Compatibility(msg),
            E::Singularity(_) | E::Numeric(_) | E::NonFinite { .. } | E::Training { .. } => CliError::Numeric(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
