//! The layering operator: `(V_top, V_bottom, A, σ_T) → V_layered` in latent
//! space, its training on latent triples and the `NBLT3` triple file.
//!
//! Triple file layout (little-endian): magic `NBL3`, u32 version, u64
//! decoder fingerprint, u32 count, u32 latent dim, then per triple
//! `top[dim], bottom[dim], albedo, sigma_t, target[dim]` as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nbrdf_core::RngStream;
use nbrdf_nn::io::{load_weights, save_weights};
use nbrdf_nn::{backward, forward, infer, l1_loss, AdamConfig, AdamState, MlpGraph, MlpWeights, Tensor};

use crate::decoder::{residual_mlp, uniform_source, weights_fingerprint};
use crate::latent::{LatentBrdf, LatentVector, LATENT_DIM};
use crate::Error;

pub const LAYERING_INPUT: usize = 2 * LATENT_DIM + 2;
pub const LAYERING_WIDTH: usize = 512;
pub const LAYERING_BLOCKS: usize = 4;
pub const TRIPLE_MAGIC: &[u8; 4] = b"NBL3";
pub const TRIPLE_VERSION: u32 = 1;

pub fn build_layering_net() -> MlpGraph {
    residual_mlp(LAYERING_INPUT, LAYERING_WIDTH, LAYERING_BLOCKS, &[], LATENT_DIM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeringNet {
    pub graph: MlpGraph,
    pub weights: MlpWeights<f32>,
}

fn push_input(x: &mut Vec<f32>, top: &LatentVector, bottom: &LatentVector, albedo: f32, sigma_t: f32) {
    x.extend_from_slice(top);
    x.extend_from_slice(bottom);
    x.push(albedo);
    x.push(sigma_t);
}

impl LayeringNet {
    pub fn init(seed: u64) -> Self {
        let graph = build_layering_net();
        let weights = graph.init_weights(uniform_source(seed, 0x1a7));
        Self { graph, weights }
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let graph = build_layering_net();
        let weights = load_weights(path, &graph)?;
        Ok(Self { graph, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        Ok(save_weights(path, &self.graph, &self.weights)?)
    }

    pub fn fingerprint(&self) -> u64 {
        weights_fingerprint(&self.graph, &self.weights)
    }

    /// Predicted latents for a batch of triples (targets ignored).
    pub fn predict(&self, triples: &[LayerTriple]) -> Vec<LatentVector> {
        let mut x = Vec::with_capacity(triples.len() * LAYERING_INPUT);
        for t in triples {
            push_input(&mut x, &t.top, &t.bottom, t.albedo, t.sigma_t);
        }
        let y = infer(&self.graph, &self.weights, &Tensor { shape: vec![triples.len(), LAYERING_INPUT], data: x }).expect("static shapes");
        y.data.chunks_exact(LATENT_DIM).map(|c| c.try_into().unwrap()).collect()
    }
}

/// Latent of `top` over a medium of per-channel albedo and shared
/// extinction over `bottom`. Channels are processed independently.
pub fn layer(net: &LayeringNet, top: &LatentBrdf, bottom: &LatentBrdf, albedo: &[f64], sigma_t: f64) -> Result<LatentBrdf, Error> {
    let n = top.n_channels();
    if bottom.n_channels() != n || albedo.len() != n {
        return Err(Error::ChannelMismatch(format!("top {n}, bottom {}, albedo {} channels", bottom.n_channels(), albedo.len())));
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::EmptyInput(format!("extinction {sigma_t} must be non-negative")));
    }
    let triples: Vec<LayerTriple> = (0..n)
        .map(|c| LayerTriple { top: *top.channel(c), bottom: *bottom.channel(c), albedo: albedo[c] as f32, sigma_t: sigma_t as f32, target: [0.0; LATENT_DIM] })
        .collect();
    LatentBrdf::new(net.predict(&triples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTriple {
    pub top: LatentVector,
    pub bottom: LatentVector,
    pub albedo: f32,
    pub sigma_t: f32,
    pub target: LatentVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleFile {
    /// Fingerprint of the decoder all latents were projected with.
    pub decoder: u64,
    pub triples: Vec<LayerTriple>,
}

impl TripleFile {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), Error> {
        w.write_all(TRIPLE_MAGIC)?;
        w.write_u32::<LittleEndian>(TRIPLE_VERSION)?;
        w.write_u64::<LittleEndian>(self.decoder)?;
        w.write_u32::<LittleEndian>(self.triples.len() as u32)?;
        w.write_u32::<LittleEndian>(LATENT_DIM as u32)?;
        for t in &self.triples {
            for v in t.top.iter().chain(&t.bottom).chain([&t.albedo, &t.sigma_t]).chain(&t.target) {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, Error> {
        let eof = crate::eof;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != TRIPLE_MAGIC {
            return Err(Error::Format("bad magic, not a triple file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != TRIPLE_VERSION {
            return Err(Error::Format(format!("unsupported triple file version {version}")));
        }
        let decoder = r.read_u64::<LittleEndian>().map_err(eof)?;
        let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if r.read_u32::<LittleEndian>().map_err(eof)? as usize != LATENT_DIM {
            return Err(Error::Format("latent dimension mismatch".into()));
        }
        let mut triples = Vec::with_capacity(count.min(1 << 20));
        let mut buf = [0f32; 3 * LATENT_DIM + 2];
        for _ in 0..count {
            r.read_f32_into::<LittleEndian>(&mut buf).map_err(eof)?;
            let d = LATENT_DIM;
            triples.push(LayerTriple {
                top: buf[..d].try_into().unwrap(),
                bottom: buf[d..2 * d].try_into().unwrap(),
                albedo: buf[2 * d],
                sigma_t: buf[2 * d + 1],
                target: buf[2 * d + 2..].try_into().unwrap(),
            });
        }
        Ok(Self { decoder, triples })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeringTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl LayeringTrainConfig {
    pub fn paper() -> Self {
        Self { epochs: 1000, lr: 3e-3, lr_decay: 0.7, decay_every: 50, batch_size: 64, seed: 1 }
    }

    pub fn desk() -> Self {
        Self { epochs: 200, decay_every: 10, ..Self::paper() }
    }

    /// Three-layer fine-tuning schedule applied after the main run.
    pub fn fine_tune(&self) -> Self {
        Self { epochs: (self.epochs / 10).max(1), lr: self.lr * self.lr_decay.powi((self.epochs / self.decay_every.max(1)) as i32), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeringEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
    pub val_l1: f64,
    pub seconds: f64,
}

/// Mean absolute latent error of the network's predictions.
pub fn latent_l1(net: &LayeringNet, triples: &[LayerTriple]) -> f64 {
    if triples.is_empty() {
        return f64::NAN;
    }
    let pred = net.predict(triples);
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(triples) {
        s += p.iter().zip(&t.target).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
    }
    s / (triples.len() * LATENT_DIM) as f64
}

fn same_decoder(sets: &[&TripleFile]) -> Result<(), Error> {
    match sets.first() {
        Some(first) if sets.iter().all(|s| s.decoder == first.decoder) => Ok(()),
        Some(_) => Err(Error::MixedDecoder),
        None => Ok(()),
    }
}

/// Fits the network with L1 on latents. Passing `init` continues from
/// existing weights, which is how the three-layer fine-tune runs; the
/// triples are only read.
pub fn train_layering(
    train: &TripleFile,
    validation: Option<&TripleFile>,
    init: Option<LayeringNet>,
    cfg: &LayeringTrainConfig,
    mut on_epoch: impl FnMut(&LayeringEpoch, &LayeringNet) -> Result<(), Error>,
) -> Result<(LayeringNet, Vec<LayeringEpoch>), Error> {
    let mut sets = vec![train];
    sets.extend(validation);
    same_decoder(&sets)?;
    if train.triples.is_empty() {
        return Err(Error::EmptyInput("no layering triples".into()));
    }
    let mut net = init.unwrap_or_else(|| LayeringNet::init(cfg.seed));
    let mut opt = AdamState::<f32>::new(net.graph.param_count(), AdamConfig::with_lr(cfg.lr));
    let mut rng = RngStream::new(cfg.seed, 0x1a8);
    let mut order: Vec<usize> = (0..train.triples.len()).collect();
    let mut history = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        opt.config.lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every.max(1)) as i32);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            x.clear();
            y.clear();
            for &k in chunk {
                let t = &train.triples[k];
                push_input(&mut x, &t.top, &t.bottom, t.albedo, t.sigma_t);
                y.extend_from_slice(&t.target);
            }
            let input = Tensor { shape: vec![chunk.len(), LAYERING_INPUT], data: std::mem::take(&mut x) };
            let (pred, saved) = forward(&net.graph, &net.weights, &input)?;
            x = input.data;
            let (loss, grad) = l1_loss(&pred.data, &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { stage: "layering", epoch });
            }
            sum += loss as f64;
            batches += 1;
            let g = backward(&net.graph, &net.weights, &saved, &Tensor { shape: pred.shape, data: grad }, true)?;
            opt.step(&mut net.weights.data, g.params.as_ref().unwrap())?;
        }
        let stats = LayeringEpoch {
            epoch: epoch + 1,
            lr: opt.config.lr,
            train_l1: sum / batches as f64,
            val_l1: validation.map_or(f64::NAN, |v| latent_l1(&net, &v.triples)),
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, &net)?;
        history.push(stats);
    }
    Ok((net, history))
}
