//! Batched forward and reverse-mode passes over an `MlpGraph`.

use crate::graph::{Layer, MlpGraph, MlpWeights, LN_EPS};
use crate::{Error, Scalar, Tensor};

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln: LnCache<T>,
    /// Post-ReLU hidden activations.
    hidden: Vec<T>,
}

enum Cache<T> {
    None,
    Ln(LnCache<T>),
    Block(BlockCache<T>),
}

/// Activations kept by `forward` for `backward`.
pub struct Saved<T> {
    batch: usize,
    input: Vec<T>,
    outputs: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
}

impl<T> Saved<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub struct Gradients<T> {
    /// Parameter gradients in `param_layout` order, when requested.
    pub params: Option<Vec<T>>,
    /// Gradient with respect to the network input, `[batch, input_dim]`.
    pub input: Tensor<T>,
}

fn linear_fwd<T: Scalar>(x: &[T], batch: usize, in_dim: usize, out_dim: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    T::gemm(batch, in_dim, out_dim, x, false, w, true, &mut y, T::one());
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    w: &[T],
    grads: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * in_dim];
    T::gemm(batch, out_dim, in_dim, dy, false, w, false, &mut dx, T::zero());
    if let Some((gw, gb)) = grads {
        T::gemm(out_dim, batch, in_dim, dy, true, x, false, gw, T::one());
        for row in dy.chunks_exact(out_dim) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += *d;
            }
        }
    }
    dx
}

fn ln_fwd<T: Scalar>(x: &[T], dim: usize, gamma: &[T], beta: &[T], keep: bool) -> (Vec<T>, Option<LnCache<T>>) {
    let n = T::from_f64(dim as f64);
    let eps = T::from_f64(LN_EPS);
    let mut y = vec![T::zero(); x.len()];
    let (mut xhat, mut rstds) = if keep { (vec![T::zero(); x.len()], Vec::with_capacity(x.len() / dim)) } else { (vec![], vec![]) };
    for (r, (xr, yr)) in x.chunks_exact(dim).zip(y.chunks_exact_mut(dim)).enumerate() {
        let mut mean = T::zero();
        for v in xr {
            mean += *v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for v in xr {
            let d = *v - mean;
            var += d * d;
        }
        var = var / n;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..dim {
            let h = (xr[i] - mean) * rstd;
            yr[i] = gamma[i] * h + beta[i];
            if keep {
                xhat[r * dim + i] = h;
            }
        }
        if keep {
            rstds.push(rstd);
        }
    }
    (y, keep.then_some(LnCache { xhat, rstd: rstds }))
}

fn ln_bwd<T: Scalar>(dy: &[T], dim: usize, cache: &LnCache<T>, gamma: &[T], grads: Option<(&mut [T], &mut [T])>) -> Vec<T> {
    let n = T::from_f64(dim as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); dim];
    for (r, (dyr, dxr)) in dy.chunks_exact(dim).zip(dx.chunks_exact_mut(dim)).enumerate() {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let (mut a, mut c) = (T::zero(), T::zero());
        for i in 0..dim {
            dxhat[i] = dyr[i] * gamma[i];
            a += dxhat[i];
            c += dxhat[i] * xh[i];
        }
        a = a / n;
        c = c / n;
        let rstd = cache.rstd[r];
        for i in 0..dim {
            dxr[i] = rstd * (dxhat[i] - a - xh[i] * c);
        }
    }
    if let Some((gg, gb)) = grads {
        for (r, dyr) in dy.chunks_exact(dim).enumerate() {
            let xh = &cache.xhat[r * dim..(r + 1) * dim];
            for i in 0..dim {
                gg[i] += dyr[i] * xh[i];
                gb[i] += dyr[i];
            }
        }
    }
    dx
}

fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

fn relu_mask<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (d, v) in dy.iter_mut().zip(y) {
        if !(*v > T::zero()) {
            *d = T::zero();
        }
    }
}

fn check_input<T: Scalar>(graph: &MlpGraph, input: &Tensor<T>, weights: &MlpWeights<T>) -> Result<usize, Error> {
    if input.shape.len() != 2 || input.shape[1] != graph.input_dim {
        return Err(Error::ShapeMismatch(format!("input {:?}, graph expects [batch, {}]", input.shape, graph.input_dim)));
    }
    if weights.data.len() != graph.param_count() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} parameters", weights.data.len(), graph.param_count())));
    }
    Ok(input.shape[0])
}

fn run<T: Scalar>(graph: &MlpGraph, weights: &MlpWeights<T>, input: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Saved<T>>), Error> {
    let batch = check_input(graph, input, weights)?;
    let layout = graph.param_layout();
    let w = &weights.data;
    let n = graph.layers.len();
    let mut needed = vec![keep; n];
    for s in &graph.skips {
        needed[s.from] = true;
    }
    let mut outputs: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut caches: Vec<Cache<T>> = Vec::with_capacity(n);
    let mut current: Vec<T> = input.data.clone();
    let mut dim = graph.input_dim;
    for (l, layer) in graph.layers.iter().enumerate() {
        let p = &layout[l];
        let (mut y, cache) = match *layer {
            Layer::Linear { in_dim, out_dim } => {
                dim = out_dim;
                (linear_fwd(&current, batch, in_dim, out_dim, &w[p[0].range()], &w[p[1].range()]), Cache::None)
            }
            Layer::LayerNorm { dim: d } => {
                let (y, c) = ln_fwd(&current, d, &w[p[0].range()], &w[p[1].range()], keep);
                (y, c.map_or(Cache::None, Cache::Ln))
            }
            Layer::Relu => {
                let mut y = current.clone();
                relu_inplace(&mut y);
                (y, Cache::None)
            }
            Layer::ResidualBlock { dim: d } => {
                let h = d / 2;
                let hpre = linear_fwd(&current, batch, d, h, &w[p[0].range()], &w[p[1].range()]);
                let (mut hidden, ln) = ln_fwd(&hpre, h, &w[p[2].range()], &w[p[3].range()], keep);
                relu_inplace(&mut hidden);
                let mut y = linear_fwd(&hidden, batch, h, d, &w[p[4].range()], &w[p[5].range()]);
                for (o, x) in y.iter_mut().zip(&current) {
                    *o += *x;
                }
                let cache = match ln {
                    Some(ln) => Cache::Block(BlockCache { ln, hidden }),
                    None => Cache::None,
                };
                (y, cache)
            }
        };
        for s in graph.skips.iter().filter(|s| s.to == l) {
            for (o, x) in y.iter_mut().zip(&outputs[s.from]) {
                *o += *x;
            }
        }
        outputs.push(if needed[l] { y.clone() } else { Vec::new() });
        caches.push(cache);
        current = y;
    }
    let out = Tensor { shape: vec![batch, dim], data: current };
    let saved = keep.then(|| Saved { batch, input: input.data.clone(), outputs, caches });
    Ok((out, saved))
}

/// Forward pass keeping the activations needed by `backward`.
pub fn forward<T: Scalar>(graph: &MlpGraph, weights: &MlpWeights<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Saved<T>), Error> {
    let (out, saved) = run(graph, weights, input, true)?;
    Ok((out, saved.unwrap()))
}

/// Forward pass without saving activations.
pub fn infer<T: Scalar>(graph: &MlpGraph, weights: &MlpWeights<T>, input: &Tensor<T>) -> Result<Tensor<T>, Error> {
    Ok(run(graph, weights, input, false)?.0)
}

/// Reverse pass for the loss whose gradient with respect to the network
/// output is `upstream`. Parameter gradients are skipped unless requested,
/// which is all a frozen-weight input optimization needs.
pub fn backward<T: Scalar>(
    graph: &MlpGraph,
    weights: &MlpWeights<T>,
    saved: &Saved<T>,
    upstream: &Tensor<T>,
    want_params: bool,
) -> Result<Gradients<T>, Error> {
    let batch = saved.batch;
    let dims = graph.dims()?;
    let out_dim = *dims.last().unwrap();
    if upstream.shape != [batch, out_dim] {
        return Err(Error::ShapeMismatch(format!("upstream {:?}, expected [{batch}, {out_dim}]", upstream.shape)));
    }
    let layout = graph.param_layout();
    let w = &weights.data;
    let mut pg = want_params.then(|| vec![T::zero(); w.len()]);
    let mut extra: Vec<Option<Vec<T>>> = (0..graph.layers.len()).map(|_| None).collect();
    let mut g = upstream.data.clone();
    for l in (0..graph.layers.len()).rev() {
        if let Some(e) = extra[l].take() {
            for (a, b) in g.iter_mut().zip(e) {
                *a += b;
            }
        }
        for s in graph.skips.iter().filter(|s| s.to == l) {
            match &mut extra[s.from] {
                Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(g.clone()),
            }
        }
        let x: &[T] = if l == 0 { &saved.input } else { &saved.outputs[l - 1] };
        let p = &layout[l];
        g = match (graph.layers[l], &saved.caches[l]) {
            (Layer::Linear { in_dim, out_dim }, _) => {
                let grads = pg.as_mut().map(|pg| {
                    let (a, b) = pg.split_at_mut(p[1].offset);
                    (&mut a[p[0].range()], &mut b[..p[1].len()])
                });
                linear_bwd(&g, x, batch, in_dim, out_dim, &w[p[0].range()], grads)
            }
            (Layer::LayerNorm { dim }, Cache::Ln(c)) => {
                let grads = pg.as_mut().map(|pg| {
                    let (a, b) = pg.split_at_mut(p[1].offset);
                    (&mut a[p[0].range()], &mut b[..p[1].len()])
                });
                ln_bwd(&g, dim, c, &w[p[0].range()], grads)
            }
            (Layer::Relu, _) => {
                relu_mask(&mut g, &saved.outputs[l]);
                g
            }
            (Layer::ResidualBlock { dim }, Cache::Block(c)) => {
                let h = dim / 2;
                let mut dh = {
                    let grads = pg.as_mut().map(|pg| {
                        let (a, b) = pg.split_at_mut(p[5].offset);
                        (&mut a[p[4].range()], &mut b[..p[5].len()])
                    });
                    linear_bwd(&g, &c.hidden, batch, h, dim, &w[p[4].range()], grads)
                };
                relu_mask(&mut dh, &c.hidden);
                let dpre = {
                    let grads = pg.as_mut().map(|pg| {
                        let (a, b) = pg.split_at_mut(p[3].offset);
                        (&mut a[p[2].range()], &mut b[..p[3].len()])
                    });
                    ln_bwd(&dh, h, &c.ln, &w[p[2].range()], grads)
                };
                let grads = pg.as_mut().map(|pg| {
                    let (a, b) = pg.split_at_mut(p[1].offset);
                    (&mut a[p[0].range()], &mut b[..p[1].len()])
                });
                let mut dx = linear_bwd(&dpre, x, batch, dim, h, &w[p[0].range()], grads);
                for (a, b) in dx.iter_mut().zip(&g) {
                    *a += *b;
                }
                dx
            }
            _ => return Err(Error::ShapeMismatch("activations were not saved".into())),
        };
    }
    Ok(Gradients { params: pg, input: Tensor { shape: vec![batch, graph.input_dim], data: g } })
}
