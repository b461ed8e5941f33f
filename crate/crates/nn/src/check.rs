//! Finite-difference gradient checks in double precision.

use crate::engine::{backward, forward, infer};
use crate::graph::{MlpGraph, MlpWeights};
use crate::{Error, Tensor};

/// Absolute floor of the relative-error denominator; below it gradients are
/// compared absolutely, since finite differences cannot resolve them.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err_params: f64,
    pub max_rel_err_input: f64,
    pub params_checked: usize,
    pub inputs_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_params.max(self.max_rel_err_input)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference `f'(0)` from `f(±h)` and `f(±2h)`.
fn stencil(f: &mut impl FnMut(f64) -> Result<f64, Error>, h: f64) -> Result<f64, Error> {
    Ok((8.0 * (f(h)? - f(-h)?) - (f(2.0 * h)? - f(-2.0 * h)?)) / (12.0 * h))
}

/// Fourth-order one-sided difference from `f(0)` through `f(4h)`; a
/// negative `h` looks backward.
fn one_sided(f: &mut impl FnMut(f64) -> Result<f64, Error>, h: f64) -> Result<f64, Error> {
    Ok((-25.0 * f(0.0)? + 48.0 * f(h)? - 36.0 * f(2.0 * h)? + 16.0 * f(3.0 * h)? - 3.0 * f(4.0 * h)?) / (12.0 * h))
}

/// Relative error of `analytic` against the closest of five difference
/// estimates: central at `h`, `h / 8` and `h / 64`, one-sided at `h / 8` in
/// both directions.
fn coordinate_error(analytic: f64, f: &mut impl FnMut(f64) -> Result<f64, Error>, h: f64) -> Result<f64, Error> {
    let n = h / 8.0;
    let estimates = [stencil(f, h)?, stencil(f, n)?, stencil(f, h / 64.0)?, one_sided(f, n)?, one_sided(f, -n)?];
    Ok(estimates.iter().map(|&e| relative_error(analytic, e)).fold(f64::INFINITY, f64::min))
}

/// Checks the gradient of `L = Σ c·y` for fixed random coefficients `c`.
/// `param_indices` selects which parameters to perturb (all when `None`).
pub fn gradient_check(
    graph: &MlpGraph,
    weights: &MlpWeights<f64>,
    input: &Tensor<f64>,
    param_indices: Option<&[usize]>,
    mut uniform: impl FnMut() -> f64,
    h: f64,
) -> Result<GradCheckReport, Error> {
    let (out, saved) = forward(graph, weights, input)?;
    let coeffs: Vec<f64> = (0..out.len()).map(|_| uniform() * 2.0 - 1.0).collect();
    let upstream = Tensor { shape: out.shape.clone(), data: coeffs.clone() };
    let grads = backward(graph, weights, &saved, &upstream, true)?;
    let pg = grads.params.unwrap();
    let loss = |w: &MlpWeights<f64>, x: &Tensor<f64>| -> Result<f64, Error> {
        Ok(infer(graph, w, x)?.data.iter().zip(&coeffs).map(|(y, c)| y * c).sum())
    };
    let all: Vec<usize>;
    let idx = match param_indices {
        Some(i) => i,
        None => {
            all = (0..weights.data.len()).collect();
            &all
        }
    };
    let mut w = weights.clone();
    let mut max_p: f64 = 0.0;
    for &i in idx {
        let orig = w.data[i];
        let mut at = |d: f64| {
            w.data[i] = orig + d;
            loss(&w, input)
        };
        let e = coordinate_error(pg[i], &mut at, h)?;
        w.data[i] = orig;
        max_p = max_p.max(e);
    }
    let mut x = input.clone();
    let mut max_i: f64 = 0.0;
    for i in 0..x.data.len() {
        let orig = x.data[i];
        let mut at = |d: f64| {
            x.data[i] = orig + d;
            loss(weights, &x)
        };
        let e = coordinate_error(grads.input.data[i], &mut at, h)?;
        x.data[i] = orig;
        max_i = max_i.max(e);
    }
    Ok(GradCheckReport { max_rel_err_params: max_p, max_rel_err_input: max_i, params_checked: idx.len(), inputs_checked: x.data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_exact_and_wrong_slopes() {
        let mut f = |d: f64| Ok((0.3 + d).sin());
        assert!(coordinate_error(0.3f64.cos(), &mut f, 3e-4).unwrap() < 1e-9);
        assert!(coordinate_error(0.3f64.cos() * 1.001, &mut f, 3e-4).unwrap() > 5e-4);
    }

    #[test]
    fn nearby_kink_keeps_the_true_slope() {
        let mut f = |d: f64| Ok(0.5 * d + 2.0 * (d - 1.1e-5).max(0.0));
        assert!(coordinate_error(0.5, &mut f, 3e-4).unwrap() < 1e-9);
        assert!(coordinate_error(2.5, &mut f, 3e-4).unwrap() > 0.1);
        assert!(coordinate_error(1.0, &mut f, 3e-4).unwrap() > 0.1);
    }
}
