//! Layer descriptors, parameter layout and initialization.

use sha2::{Digest, Sha256};

use crate::{Error, Scalar};

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Linear { in_dim: usize, out_dim: usize },
    LayerNorm { dim: usize },
    Relu,
    /// Bottleneck block `x + FC(d/2→d)(ReLU(LN(FC(d→d/2)(x))))`. Its output is
    /// the pre-normalization sum; the graph follows it with LayerNorm and ReLU.
    ResidualBlock { dim: usize },
}

/// Adds the output of layer `from` to the output of layer `to`, which must be
/// immediately followed by a LayerNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkipAdd {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpGraph {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub skips: Vec<SkipAdd>,
}

/// Location of one parameter tensor inside the flat store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl MlpGraph {
    pub fn new(input_dim: usize, layers: Vec<Layer>, skips: Vec<SkipAdd>) -> Result<Self, Error> {
        let g = Self { input_dim, layers, skips };
        g.validate()?;
        Ok(g)
    }

    /// Output width of every layer.
    pub fn dims(&self) -> Result<Vec<usize>, Error> {
        let mut d = self.input_dim;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            d = match *l {
                Layer::Linear { in_dim, out_dim } => {
                    if in_dim != d {
                        return Err(Error::InvalidGraph(format!("layer {i}: Linear expects {in_dim} inputs, gets {d}")));
                    }
                    out_dim
                }
                Layer::LayerNorm { dim } | Layer::ResidualBlock { dim } => {
                    if dim != d {
                        return Err(Error::InvalidGraph(format!("layer {i}: expects width {dim}, gets {d}")));
                    }
                    if matches!(l, Layer::ResidualBlock { .. }) && (dim < 2 || dim % 2 != 0) {
                        return Err(Error::InvalidGraph(format!("layer {i}: residual width must be even")));
                    }
                    dim
                }
                Layer::Relu => d,
            };
            out.push(d);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(Error::InvalidGraph("empty graph".into()));
        }
        let dims = self.dims()?;
        for s in &self.skips {
            if s.from >= s.to || s.to >= self.layers.len() {
                return Err(Error::InvalidGraph(format!("skip {s:?} must go forward within the graph")));
            }
            if dims[s.from] != dims[s.to] {
                return Err(Error::InvalidGraph(format!("skip {s:?} joins widths {} and {}", dims[s.from], dims[s.to])));
            }
            if !matches!(self.layers[s.to], Layer::Linear { .. } | Layer::ResidualBlock { .. })
                || !matches!(self.layers.get(s.to + 1), Some(Layer::LayerNorm { .. }))
            {
                return Err(Error::InvalidGraph(format!("skip {s:?} must land before a normalization")));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.dims().ok().and_then(|d| d.last().copied()).unwrap_or(0)
    }

    /// Parameter tensors of every layer in storage order.
    pub fn param_layout(&self) -> Vec<Vec<ParamSlot>> {
        let mut offset = 0;
        let mut slot = |shape: Vec<usize>| {
            let s = ParamSlot { offset, shape };
            offset += s.len();
            s
        };
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Linear { in_dim, out_dim } => vec![slot(vec![out_dim, in_dim]), slot(vec![out_dim])],
                Layer::LayerNorm { dim } => vec![slot(vec![dim]), slot(vec![dim])],
                Layer::Relu => vec![],
                Layer::ResidualBlock { dim } => {
                    let h = dim / 2;
                    vec![slot(vec![h, dim]), slot(vec![h]), slot(vec![h]), slot(vec![h]), slot(vec![dim, h]), slot(vec![dim])]
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().flatten().map(|s| s.len()).sum()
    }

    /// Hash of the descriptor list, stored in weight files.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"mlp");
        h.update((self.input_dim as u64).to_le_bytes());
        for l in &self.layers {
            let (tag, a, b) = match *l {
                Layer::Linear { in_dim, out_dim } => (0u8, in_dim, out_dim),
                Layer::LayerNorm { dim } => (1, dim, 0),
                Layer::Relu => (2, 0, 0),
                Layer::ResidualBlock { dim } => (3, dim, 0),
            };
            h.update([tag]);
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        for s in &self.skips {
            h.update([4u8]);
            h.update((s.from as u64).to_le_bytes());
            h.update((s.to as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Kaiming-uniform weights (bound √(6/fan_in)), zero biases, unit LN scale.
    pub fn init_weights<T: Scalar>(&self, mut uniform: impl FnMut() -> f64) -> MlpWeights<T> {
        let mut data = vec![T::zero(); self.param_count()];
        let mut kaiming = |slot: &ParamSlot, data: &mut [T]| {
            let fan_in = slot.shape[1] as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in &mut data[slot.range()] {
                *v = T::from_f64((2.0 * uniform() - 1.0) * bound);
            }
        };
        for (layer, slots) in self.layers.iter().zip(self.param_layout()) {
            match layer {
                Layer::Linear { .. } => kaiming(&slots[0], &mut data),
                Layer::LayerNorm { .. } => data[slots[0].range()].fill(T::one()),
                Layer::Relu => {}
                Layer::ResidualBlock { .. } => {
                    kaiming(&slots[0], &mut data);
                    data[slots[2].range()].fill(T::one());
                    kaiming(&slots[4], &mut data);
                }
            }
        }
        MlpWeights { data }
    }
}

/// Flat parameter store laid out by `MlpGraph::param_layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T = f32> {
    pub data: Vec<T>,
}

impl<T: Scalar> MlpWeights<T> {
    pub fn zeros(graph: &MlpGraph) -> Self {
        Self { data: vec![T::zero(); graph.param_count()] }
    }

    pub fn cast<U: Scalar>(&self) -> MlpWeights<U> {
        MlpWeights { data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap())).collect() }
    }
}
