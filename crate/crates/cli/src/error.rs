//! CLI error wrapper mapping failures to the documented exit codes:
//! 2 for configuration errors, 3 for missing upstream artifacts, 4 for
//! numerical failures, 1 for anything else.

use std::fmt;

use agemap_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration (file, schema, or override).
    Config(String),
    /// A pipeline stage failed; carries the stage name for the hint.
    Stage { stage: &'static str, source: Error },
    /// A failure outside any stage body.
    Core(Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Stage { stage, source } => write!(f, "stage {stage}: {source}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn core(&self) -> Option<&Error> {
        match self {
            CliError::Config(_) => None,
            CliError::Stage { source, .. } => Some(source),
            CliError::Core(e) => Some(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.core() {
            None => 2,
            Some(Error::MissingArtifact(_)) => 3,
            Some(Error::Numerical(_) | Error::NonFinite { .. } | Error::Degenerate(_)) => 4,
            Some(Error::InvalidArgument(_)) => 2,
            Some(_) => 1,
        }
    }
}
