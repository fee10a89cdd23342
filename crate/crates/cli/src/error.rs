use std::fmt;

/// Command failure, grouped by process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, parameter or precondition (exit 2).
    Config(String),
    /// Non-finite values during training or evaluation (exit 3).
    Numeric(String),
    /// Unreadable, unwritable, malformed or corrupted files (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ibpvae::Error> for CliError {
    fn from(e: ibpvae::Error) -> Self {
        use ibpvae::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::Precondition(_) | E::ShapeMismatch(_) | E::Config(_) => {
                CliError::Config(msg)
            }
            E::NonFinite(_) | E::NumericFailure { .. } => CliError::Numeric(msg),
            E::Format(_) | E::Checksum(_) | E::Io(_) | E::Json(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<png::EncodingError> for CliError {
    fn from(e: png::EncodingError) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
