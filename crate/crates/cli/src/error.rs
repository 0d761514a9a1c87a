use std::fmt;

/// Failure of a CLI run, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; exit code 2.
    Config(String),
    /// Numerical failure during a solve; exit code 3.
    Numerical(igsense::Error),
    /// `verify` ran but some checks missed their tolerance; exit code 3.
    Verification(String),
    /// Could not write output; exit code 1.
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Verification(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
            CliError::Verification(_) => "verification",
            CliError::Io(_) => "io",
        }
    }

    /// Errors raised while building a study from its config are configuration errors.
    pub fn setup(e: igsense::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Verification(msg) => f.write_str(msg),
            CliError::Numerical(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<igsense::Error> for CliError {
    fn from(e: igsense::Error) -> Self {
        use igsense::Error::*;
        match e {
            InvalidInput(_)
            | InvalidObservationPoint { .. }
            | IndexOutOfRange { .. }
            | DimensionMismatch { .. }
            | UnsupportedDistribution(_)
            | DimensionGuard { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.into())
    }
}
