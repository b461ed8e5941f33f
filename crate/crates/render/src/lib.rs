//! A small deterministic path tracer for analytic, tabulated and neural
//! materials, plus lobe images and image comparison.

pub mod buffer;
pub mod geometry;
pub mod image;
pub mod integrator;
pub mod lobe;
pub mod material;
pub mod scene;

use thiserror::Error;

pub use image::{image_metrics, ImageBuffer, ImageMetrics};
pub use integrator::{render, Filter, RenderOptions, RenderOutput, Strategy};
pub use lobe::{render_lobe, render_lobe_with};
pub use material::{Material, NeuralSampling};
pub use scene::{Camera, Light, Scene};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] nbrdf_core::Error),
    #[error(transparent)]
    Neural(#[from] nbrdf_neural::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("image dimensions differ: {0}")]
    DimMismatch(String),
    #[error("unresolved binding: {0}")]
    UnresolvedMaterial(String),
    #[error("scene line {line}: {message}")]
    Scene { line: usize, message: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("render produced non-finite radiance")]
    NonFinite,
}
