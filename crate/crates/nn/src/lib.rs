//! Dense MLP engine: layer graphs, batched forward/backward passes, Adam, and
//! the L1 and softmax-KL losses. Works in `f32` for training and `f64` for
//! gradient checking.

pub mod check;
pub mod engine;
pub mod graph;
pub mod io;
pub mod loss;
pub mod optim;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use engine::{backward, forward, infer, Gradients, Saved};
pub use graph::{Layer, MlpGraph, MlpWeights, SkipAdd};
pub use loss::{kld_loss, l1_loss};
pub use optim::{AdamConfig, AdamState, SparseAdam};

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error("weights were saved for a different architecture")]
    ArchitectureMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point element type with a matrix-multiply kernel.
pub trait Scalar: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` for row-major slices: `A` is `m×k`, `B` is `k×n`.
    /// `trans_a`/`trans_b` read the stored matrices transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, c: &mut [Self], beta: Self);

    fn from_f64(x: f64) -> Self;
}

fn check_gemm_sizes(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k && b >= k * n && c >= m * n, "gemm operand too small");
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], trans_a: bool, b: &[f32], trans_b: bool, c: &mut [f32], beta: f32) {
        check_gemm_sizes(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: sizes checked above; strides describe dense row-major storage
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
        check_gemm_sizes(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: sizes checked above; strides describe dense row-major storage
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }

    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, Error> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, Error> {
        Self::new(vec![rows, cols], data)
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
