//! The `nbrdf` command-line pipelines.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 IO or malformed input, 4 diverged loss.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Format(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<nbrdf_core::Error> for CliError {
    fn from(e: nbrdf_core::Error) -> Self {
        match e {
            nbrdf_core::Error::Io(e) => CliError::Io(e),
            e @ (nbrdf_core::Error::Format(_) | nbrdf_core::Error::TruncatedFile) => CliError::Format(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<nbrdf_nn::Error> for CliError {
    fn from(e: nbrdf_nn::Error) -> Self {
        match e {
            nbrdf_nn::Error::Io(e) => CliError::Io(e),
            e @ (nbrdf_nn::Error::Format(_) | nbrdf_nn::Error::ArchitectureMismatch) => CliError::Format(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<nbrdf_neural::Error> for CliError {
    fn from(e: nbrdf_neural::Error) -> Self {
        use nbrdf_neural::Error as E;
        match e {
            E::Core(e) => e.into(),
            E::Nn(e) => e.into(),
            e @ E::DivergedLoss { .. } => CliError::Diverged(e.to_string()),
            e @ (E::Format(_) | E::MixedDecoder) => CliError::Format(e.to_string()),
            e @ E::ChannelMismatch(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<nbrdf_render::Error> for CliError {
    fn from(e: nbrdf_render::Error) -> Self {
        use nbrdf_render::Error as E;
        match e {
            E::Io(e) => CliError::Io(e),
            E::Core(e) => e.into(),
            E::Neural(e) => e.into(),
            e @ (E::Format(_) | E::DimMismatch(_)) => CliError::Format(e.to_string()),
            e @ (E::Scene { .. } | E::UnresolvedMaterial(_) | E::InvalidArgument(_)) => CliError::Config(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}
