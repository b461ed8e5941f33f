//! The representation/evaluation network: `[latent ‖ ωi ‖ ωo] → f(ωi, ωo)`.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use nbrdf_core::dataset::{BatchCursor, Dataset, Sample, Split};
use nbrdf_core::math::spherical_to_dir;
use nbrdf_core::oracle::GridSpec;
use nbrdf_core::{Direction, RngStream};
use nbrdf_nn::io::{load_weights, save_weights};
use nbrdf_nn::{backward, forward, infer, l1_loss, AdamConfig, AdamState, Layer, MlpGraph, MlpWeights, SkipAdd, SparseAdam, Tensor};
use sha2::{Digest, Sha256};

use crate::latent::{LatentBrdf, LatentVector, LATENT_DIM, ONES};
use crate::Error;

pub const DECODER_INPUT: usize = LATENT_DIM + 6;
pub const DECODER_WIDTH: usize = 256;
pub const DECODER_BLOCKS: usize = 8;
/// Blocks (1-based) whose residual sums receive the stem output.
pub const DECODER_SKIP_BLOCKS: [usize; 3] = [3, 5, 7];
/// Rows per inference call.
pub const EVAL_CHUNK: usize = 2048;

/// `FC+LN+ReLU` stem, `blocks × [ResidualBlock, LN, ReLU, FC, LN, ReLU]`,
/// linear head. Skips run from the stem to the chosen blocks.
pub(crate) fn residual_mlp(input: usize, width: usize, blocks: usize, skip_blocks: &[usize], output: usize) -> MlpGraph {
    let mut layers = vec![Layer::Linear { in_dim: input, out_dim: width }, Layer::LayerNorm { dim: width }, Layer::Relu];
    for _ in 0..blocks {
        layers.extend([
            Layer::ResidualBlock { dim: width },
            Layer::LayerNorm { dim: width },
            Layer::Relu,
            Layer::Linear { in_dim: width, out_dim: width },
            Layer::LayerNorm { dim: width },
            Layer::Relu,
        ]);
    }
    layers.push(Layer::Linear { in_dim: width, out_dim: output });
    let skips = skip_blocks.iter().map(|&b| SkipAdd { from: 2, to: 3 + 6 * (b - 1) }).collect();
    MlpGraph::new(input, layers, skips).expect("static wiring is valid")
}

pub fn build_decoder() -> MlpGraph {
    residual_mlp(DECODER_INPUT, DECODER_WIDTH, DECODER_BLOCKS, &DECODER_SKIP_BLOCKS, 1)
}

pub(crate) fn uniform_source(seed: u64, stream: u64) -> impl FnMut() -> f64 {
    let mut rng = RngStream::new(seed, stream);
    move || rng.next_f64()
}

/// Hash of architecture and parameter bits.
pub(crate) fn weights_fingerprint(graph: &MlpGraph, weights: &MlpWeights<f32>) -> u64 {
    let mut h = Sha256::new();
    h.update(graph.fingerprint().to_le_bytes());
    for v in &weights.data {
        h.update(v.to_bits().to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub graph: MlpGraph,
    pub weights: MlpWeights<f32>,
}

/// One evaluation request.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub latent: &'a LatentVector,
    pub wi: Direction,
    pub wo: Direction,
}

#[inline]
pub(crate) fn push_row(buf: &mut Vec<f32>, z: &LatentVector, wi: Direction, wo: Direction) {
    buf.extend_from_slice(z);
    buf.extend_from_slice(&wi.as_f32());
    buf.extend_from_slice(&wo.as_f32());
}

impl Decoder {
    pub fn init(seed: u64) -> Self {
        let graph = build_decoder();
        let weights = graph.init_weights(uniform_source(seed, 0xdec0));
        Self { graph, weights }
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let graph = build_decoder();
        let weights = load_weights(path, &graph)?;
        Ok(Self { graph, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        Ok(save_weights(path, &self.graph, &self.weights)?)
    }

    pub fn fingerprint(&self) -> u64 {
        weights_fingerprint(&self.graph, &self.weights)
    }

    /// Raw network outputs, unclamped.
    pub fn eval_queries(&self, queries: &[Query]) -> Vec<f32> {
        let mut out = Vec::with_capacity(queries.len());
        let mut buf = Vec::with_capacity(EVAL_CHUNK * DECODER_INPUT);
        for chunk in queries.chunks(EVAL_CHUNK) {
            buf.clear();
            for q in chunk {
                push_row(&mut buf, q.latent, q.wi, q.wo);
            }
            let x = Tensor { shape: vec![chunk.len(), DECODER_INPUT], data: std::mem::take(&mut buf) };
            out.extend(infer(&self.graph, &self.weights, &x).expect("decoder shapes are static").data);
            buf = x.data;
        }
        out
    }

    /// Raw outputs for one latent over many direction pairs.
    pub fn eval_pairs(&self, latent: &LatentVector, pairs: &[(Direction, Direction)]) -> Vec<f32> {
        let q: Vec<Query> = pairs.iter().map(|&(wi, wo)| Query { latent, wi, wo }).collect();
        self.eval_queries(&q)
    }

    /// Decoded values over every pair of a tabulation grid.
    pub fn decode_grid(&self, latent: &LatentVector, grid: GridSpec) -> Vec<f32> {
        let dirs = grid.directions();
        let pairs: Vec<_> = dirs.iter().flat_map(|&wi| dirs.iter().map(move |&wo| (wi, wo))).collect();
        self.eval_pairs(latent, &pairs)
    }
}

/// Per-channel BRDF value; negative network outputs are clamped to zero.
pub fn eval_brdf(decoder: &Decoder, latent: &LatentBrdf, wi: Direction, wo: Direction) -> Result<Vec<f32>, Error> {
    if !(wi.z > 0.0) || !(wo.z > 0.0) {
        return Err(Error::InvalidDirection);
    }
    let q: Vec<Query> = latent.channels().iter().map(|z| Query { latent: z, wi, wo }).collect();
    Ok(decoder.eval_queries(&q).into_iter().map(|v| v.max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    /// Samples drawn per epoch from the training records; 0 uses all.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub latent_lr: f64,
    /// Both learning rates are multiplied by this after every epoch.
    pub lr_decay: f64,
    /// Validation samples per step; their latents are fitted with the
    /// weights held fixed, so the loss measures generalization.
    pub validation_batch: usize,
    pub seed: u64,
}

impl DecoderTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            samples_per_epoch: 2_000_000,
            batch_size: 1024,
            weight_lr: 3e-4,
            latent_lr: 1e-4,
            lr_decay: 0.9,
            validation_batch: 128,
            seed: 1,
        }
    }

    pub fn paper() -> Self {
        Self { epochs: 50, samples_per_epoch: 0, batch_size: 4096, validation_batch: 512, ..Self::desk() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
    pub weight_lr: f64,
    pub latent_lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedDecoder {
    pub decoder: Decoder,
    /// One latent per dataset record, in record order.
    pub latents: Vec<LatentVector>,
    pub history: Vec<EpochStats>,
}

fn batch_input(samples: &[Sample], latents: &[LatentVector]) -> (Tensor<f32>, Vec<f32>) {
    let mut x = Vec::with_capacity(samples.len() * DECODER_INPUT);
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        push_row(&mut x, &latents[s.record], s.wi, s.wo);
        y.push(s.value);
    }
    (Tensor { shape: vec![samples.len(), DECODER_INPUT], data: x }, y)
}

/// Sums the latent part of the input gradient per record and applies one
/// sparse Adam step to each touched latent. Records are visited in order of
/// first appearance, keeping the update deterministic.
fn update_latents(samples: &[Sample], input_grad: &[f32], latents: &mut [LatentVector], opt: &mut SparseAdam<f32>) {
    let mut order: Vec<usize> = Vec::new();
    let mut acc: HashMap<usize, LatentVector> = HashMap::new();
    for (s, g) in samples.iter().zip(input_grad.chunks_exact(DECODER_INPUT)) {
        let e = acc.entry(s.record).or_insert_with(|| {
            order.push(s.record);
            [0.0; LATENT_DIM]
        });
        for (a, b) in e.iter_mut().zip(&g[..LATENT_DIM]) {
            *a += *b;
        }
    }
    for r in order {
        opt.step_row(r, &mut latents[r], &acc[&r]);
    }
}

/// Jointly optimizes decoder weights and one latent per training record.
/// `on_epoch` runs after every epoch (checkpointing, logging); a non-finite
/// loss stops training with `DivergedLoss` before the next callback.
pub fn train_decoder(
    ds: &Dataset,
    cfg: &DecoderTrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Decoder, &[LatentVector]) -> Result<(), Error>,
) -> Result<TrainedDecoder, Error> {
    let train = ds.indices(|r| r.split == Split::Train);
    let val = ds.indices(|r| r.split == Split::Validation);
    if train.is_empty() {
        return Err(Error::EmptyInput("no training records".into()));
    }
    let mut decoder = Decoder::init(cfg.seed);
    let mut latents = vec![ONES; ds.records.len()];
    let mut wopt = AdamState::<f32>::new(decoder.graph.param_count(), AdamConfig::with_lr(cfg.weight_lr));
    let mut lopt = SparseAdam::<f32>::new(ds.records.len(), LATENT_DIM, AdamConfig::with_lr(cfg.latent_lr));
    let mut val_cursor = (!val.is_empty()).then(|| BatchCursor::new(ds, val.clone(), cfg.validation_batch.max(1), cfg.seed ^ 0x7a1));
    let mut val_epoch = 0u64;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let decay = cfg.lr_decay.powi(epoch as i32);
        wopt.config.lr = cfg.weight_lr * decay;
        lopt.config.lr = cfg.latent_lr * decay;
        let mut cursor = BatchCursor::new(ds, train.clone(), cfg.batch_size, nbrdf_core::rng::mix64(cfg.seed ^ (epoch as u64 + 1)));
        let budget = if cfg.samples_per_epoch == 0 { cursor.total() } else { (cfg.samples_per_epoch as u64).min(cursor.total()) };
        let (mut seen, mut train_sum, mut train_n) = (0u64, 0.0f64, 0usize);
        let (mut val_sum, mut val_n) = (0.0f64, 0usize);
        while seen < budget {
            let Some(batch) = cursor.next_batch(ds) else { break };
            seen += batch.len() as u64;
            let (x, y) = batch_input(&batch, &latents);
            let (pred, saved) = forward(&decoder.graph, &decoder.weights, &x)?;
            let (loss, grad) = l1_loss(&pred.data, &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { stage: "decoder", epoch });
            }
            train_sum += loss as f64;
            train_n += 1;
            let up = Tensor { shape: pred.shape.clone(), data: grad };
            let g = backward(&decoder.graph, &decoder.weights, &saved, &up, true)?;
            wopt.step(&mut decoder.weights.data, g.params.as_ref().unwrap())?;
            update_latents(&batch, &g.input.data, &mut latents, &mut lopt);

            if let Some(vc) = val_cursor.as_mut() {
                let vb = match vc.next_batch(ds) {
                    Some(b) => b,
                    None => {
                        val_epoch += 1;
                        *vc = BatchCursor::new(ds, val.clone(), cfg.validation_batch.max(1), cfg.seed ^ 0x7a1 ^ (val_epoch << 8));
                        vc.next_batch(ds).unwrap()
                    }
                };
                let (vx, vy) = batch_input(&vb, &latents);
                let (vp, vs) = forward(&decoder.graph, &decoder.weights, &vx)?;
                let (vl, vg) = l1_loss(&vp.data, &vy)?;
                val_sum += vl as f64;
                val_n += 1;
                let vg = backward(&decoder.graph, &decoder.weights, &vs, &Tensor { shape: vp.shape, data: vg }, false)?;
                update_latents(&vb, &vg.input.data, &mut latents, &mut lopt);
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_l1: train_sum / train_n.max(1) as f64,
            val_l1: if val_n > 0 { val_sum / val_n as f64 } else { f64::NAN },
            weight_lr: wopt.config.lr,
            latent_lr: lopt.config.lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, &decoder, &latents)?;
        history.push(stats);
    }
    Ok(TrainedDecoder { decoder, latents, history })
}

/// Source of supervised samples for latent projection.
pub trait ProjectionTarget: Sync {
    /// Appends `n` `(ωi, ωo, value)` samples.
    fn sample(&self, rng: &mut RngStream, n: usize, out: &mut Vec<(Direction, Direction, f32)>);
}

/// A BRDF given as a function, sampled uniformly in `(θ, φ)` over both
/// hemispheres, the same measure as the tabulation grid.
pub struct FnTarget<F>(pub F);

impl<F: Fn(Direction, Direction) -> f64 + Sync> ProjectionTarget for FnTarget<F> {
    fn sample(&self, rng: &mut RngStream, n: usize, out: &mut Vec<(Direction, Direction, f32)>) {
        let dir = |rng: &mut RngStream| {
            let (a, b) = rng.next_2d();
            spherical_to_dir(a * std::f64::consts::FRAC_PI_2, b * std::f64::consts::TAU)
        };
        for _ in 0..n {
            let wi = dir(rng);
            let wo = dir(rng);
            out.push((wi, wo, (self.0)(wi, wo) as f32));
        }
    }
}

/// A tabulated BRDF, sampled over its grid pairs.
pub struct GridTarget<'a> {
    pub grid: GridSpec,
    pub values: &'a [f32],
    dirs: Vec<Direction>,
}

impl<'a> GridTarget<'a> {
    pub fn new(grid: GridSpec, values: &'a [f32]) -> Self {
        Self { grid, values, dirs: grid.directions() }
    }
}

impl ProjectionTarget for GridTarget<'_> {
    fn sample(&self, rng: &mut RngStream, n: usize, out: &mut Vec<(Direction, Direction, f32)>) {
        let m = self.dirs.len();
        for _ in 0..n {
            let p = rng.below(self.values.len() as u64) as usize;
            out.push((self.dirs[p / m], self.dirs[p % m], self.values[p]));
        }
    }
}

/// A latent under a decoder, used as a target (self-consistency checks).
pub struct DecodedTarget<'a> {
    pub decoder: &'a Decoder,
    pub latent: LatentVector,
}

impl ProjectionTarget for DecodedTarget<'_> {
    fn sample(&self, rng: &mut RngStream, n: usize, out: &mut Vec<(Direction, Direction, f32)>) {
        let start = out.len();
        FnTarget(|_: Direction, _: Direction| 0.0).sample(rng, n, out);
        let pairs: Vec<_> = out[start..].iter().map(|&(a, b, _)| (a, b)).collect();
        for (o, v) in out[start..].iter_mut().zip(self.decoder.eval_pairs(&self.latent, &pairs)) {
            o.2 = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    /// Initial learning rate; decays geometrically to `lr_final` at `max_steps`.
    pub lr: f64,
    pub lr_final: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Stop when the mean loss of a window improves by less than
    /// `min_rel_improvement` relative to the previous window.
    pub window: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    /// Starting latent; all ones when `None`.
    pub init: Option<LatentVector>,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self { lr: 1e-4, lr_final: 1e-4, max_steps: 2000, batch_size: 256, window: 50, min_rel_improvement: 1e-4, seed: 1, init: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub latent: LatentVector,
    pub steps: usize,
    /// Best window-mean loss after each window; non-increasing.
    pub best_losses: Vec<f64>,
}

/// Optimizes one latent against a target with the decoder frozen.
pub fn project_channel(decoder: &Decoder, target: &dyn ProjectionTarget, cfg: &ProjectConfig) -> Result<Projection, Error> {
    let mut z = cfg.init.unwrap_or(ONES);
    let mut opt = AdamState::<f32>::new(LATENT_DIM, AdamConfig::with_lr(cfg.lr));
    let mut rng = RngStream::new(cfg.seed, 0x9f0);
    let window = cfg.window.max(1);
    let ratio = if cfg.max_steps > 1 { (cfg.lr_final / cfg.lr).powf(1.0 / (cfg.max_steps - 1) as f64) } else { 1.0 };
    let mut samples = Vec::with_capacity(cfg.batch_size);
    let mut x = Vec::with_capacity(cfg.batch_size * DECODER_INPUT);
    let (mut win_sum, mut prev_mean) = (0.0f64, f64::INFINITY);
    let mut best = (f64::INFINITY, z);
    let mut best_losses = Vec::new();
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        samples.clear();
        target.sample(&mut rng, cfg.batch_size, &mut samples);
        if samples.iter().any(|s| !s.2.is_finite()) {
            return Err(Error::NonFiniteTarget);
        }
        x.clear();
        for &(wi, wo, _) in &samples {
            push_row(&mut x, &z, wi, wo);
        }
        let y: Vec<f32> = samples.iter().map(|s| s.2).collect();
        let input = Tensor { shape: vec![samples.len(), DECODER_INPUT], data: std::mem::take(&mut x) };
        let (pred, saved) = forward(&decoder.graph, &decoder.weights, &input)?;
        x = input.data;
        let (loss, grad) = l1_loss(&pred.data, &y)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { stage: "projection", epoch: step });
        }
        let g = backward(&decoder.graph, &decoder.weights, &saved, &Tensor { shape: pred.shape, data: grad }, false)?;
        let mut gz = [0f32; LATENT_DIM];
        for row in g.input.data.chunks_exact(DECODER_INPUT) {
            for (a, b) in gz.iter_mut().zip(&row[..LATENT_DIM]) {
                *a += *b;
            }
        }
        opt.config.lr = cfg.lr * ratio.powi(step as i32);
        opt.step(&mut z, &gz)?;
        steps = step + 1;
        win_sum += loss as f64;
        if steps % window == 0 {
            let mean = win_sum / window as f64;
            win_sum = 0.0;
            if mean < best.0 {
                best = (mean, z);
            }
            best_losses.push(best.0);
            if prev_mean.is_finite() && (prev_mean - mean) / prev_mean < cfg.min_rel_improvement {
                break;
            }
            prev_mean = mean;
        }
    }
    let latent = if best.0.is_finite() { best.1 } else { z };
    Ok(Projection { latent, steps, best_losses })
}

/// Projects every channel of a BRDF (`N_rep`).
pub fn project_brdf(decoder: &Decoder, targets: &[&dyn ProjectionTarget], cfg: &ProjectConfig) -> Result<LatentBrdf, Error> {
    let mut ch = Vec::with_capacity(targets.len());
    for (c, t) in targets.iter().enumerate() {
        let cfg = ProjectConfig { seed: cfg.seed.wrapping_add(c as u64), ..cfg.clone() };
        ch.push(project_channel(decoder, *t, &cfg)?.latent);
    }
    LatentBrdf::new(ch)
}
