use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 configuration, 3 data (including i/o), 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<sde_fim::Error> for CliError {
    fn from(e: sde_fim::Error) -> Self {
        use sde_fim::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::UnknownSystem(_) => CliError::Config(msg),
            E::Numeric(_) | E::DegenerateDiffusion { .. } | E::RejectionCap { .. } => CliError::Numeric(msg),
            E::Io(_) => CliError::Io(msg),
            E::Dimension { .. } | E::EmptyContext | E::DegeneratePath(_) | E::Format(_) | E::Json(_) => CliError::Data(msg),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
