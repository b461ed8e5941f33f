//! Neural BRDF models: the latent decoder, the learned importance sampler,
//! the layering operator and spatially varying latent textures.

pub mod decoder;
pub mod latent;
pub mod layering;
pub mod sampler;
pub mod texture;

use std::io;

use thiserror::Error;

pub use decoder::{eval_brdf, project_brdf, train_decoder, Decoder, DecoderTrainConfig, ProjectConfig};
pub use latent::{LatentBrdf, LatentFile, LatentVector, LATENT_DIM};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nbrdf_core::Error),
    #[error(transparent)]
    Nn(#[from] nbrdf_nn::Error),
    #[error("direction below the surface")]
    InvalidDirection,
    #[error("{stage} loss became non-finite at step/epoch {epoch}")]
    DivergedLoss { stage: &'static str, epoch: usize },
    #[error("target returned a non-finite value")]
    NonFiniteTarget,
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("interpolation weights must sum to one")]
    WeightSum,
    #[error("distribution has no mass")]
    AllZeroGndf,
    #[error("latents come from different decoders")]
    MixedDecoder,
    #[error("nothing to work on: {0}")]
    EmptyInput(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn eof(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}
