//! Training losses. Each returns the loss and its gradient with respect to
//! the prediction.

use crate::{Error, Scalar};

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(pred: &[T], gt: &[T]) -> Result<(T, Vec<T>), Error> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("l1 over {} and {} elements", pred.len(), gt.len())));
    }
    let n = T::from_f64(pred.len() as f64);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = p - g;
            loss += d.abs();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss / n, grad))
}

fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &v in x {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    x.iter().map(|&v| v - lse).collect()
}

/// `(1/M) Σ S(gt)·(log S(gt) − log S(pred))` with `S` the softmax over the
/// `M` samples.
pub fn kld_loss<T: Scalar>(pred: &[T], gt: &[T]) -> Result<(T, Vec<T>), Error> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::ShapeMismatch(format!("kld over {} and {} samples", pred.len(), gt.len())));
    }
    let m = T::from_f64(pred.len() as f64);
    let lp = log_softmax(pred);
    let lg = log_softmax(gt);
    let mut loss = T::zero();
    for (&a, &b) in lg.iter().zip(&lp) {
        let sg = a.exp();
        if sg > T::zero() {
            loss += sg * (a - b);
        }
    }
    let grad = lp.iter().zip(&lg).map(|(&b, &a)| (b.exp() - a.exp()) / m).collect();
    Ok((loss / m, grad))
}
