//! Adam with bias correction, dense and row-sparse.

use crate::{Error, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), Error> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        adam_update(&self.config, self.step, params, grads, &mut self.m, &mut self.v);
        Ok(())
    }
}

fn adam_update<T: Scalar>(c: &AdamConfig, step: u64, params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T]) {
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);
    // folded bias correction: lr·m̂/(√v̂+ε) = step_size·m/(√v + ε·√bc2)
    let step_size = T::from_f64(c.lr * bc2.sqrt() / bc1);
    let eps = T::from_f64(c.eps * bc2.sqrt());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        params[i] -= step_size * m[i] / (v[i].sqrt() + eps);
    }
}

/// Adam over a table of equal-width rows where each step touches only some
/// rows; every row keeps its own step count so untouched rows do not decay.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdam<T = f32> {
    pub config: AdamConfig,
    pub width: usize,
    m: Vec<T>,
    v: Vec<T>,
    steps: Vec<u64>,
}

impl<T: Scalar> SparseAdam<T> {
    pub fn new(rows: usize, width: usize, config: AdamConfig) -> Self {
        Self { config, width, m: vec![T::zero(); rows * width], v: vec![T::zero(); rows * width], steps: vec![0; rows] }
    }

    pub fn step_row(&mut self, row: usize, params: &mut [T], grads: &[T]) {
        let w = self.width;
        assert!(params.len() == w && grads.len() == w, "row width mismatch");
        self.steps[row] += 1;
        let r = row * w..(row + 1) * w;
        adam_update(&self.config, self.steps[row], params, grads, &mut self.m[r.clone()], &mut self.v[r]);
    }
}
