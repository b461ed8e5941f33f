//! Geometry, analytic microfacet models, the layered-material Monte Carlo
//! oracle, and the tabulated BRDF dataset format.

pub mod analytic;
pub mod dataset;
pub mod math;
pub mod oracle;
pub mod rng;
pub mod stats;

pub use math::{Direction, Vec3};
pub use rng::RngStream;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("half vector is undefined for opposite directions")]
    DegenerateHalfVector,
    #[error("sampled direction is invalid")]
    NullSample,
    #[error("direction must lie in the upper hemisphere")]
    InvalidDirection,
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("dataset file is truncated")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
