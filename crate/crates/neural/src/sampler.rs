//! Learned importance sampling: GNDF tables, the Gaussian + Lambertian proxy
//! density, the four-layer parameter network and its KLD training.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_PI, PI};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::RwLock;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nbrdf_core::math::{half_vector, reflect, sample_cosine_hemisphere, stratified_hemisphere_grid, ProjectedHalfVector};
use nbrdf_core::{Direction, RngStream, Vec3};
use nbrdf_nn::io::{load_weights, save_weights};
use nbrdf_nn::{backward, forward, infer, kld_loss, AdamConfig, AdamState, Layer, MlpGraph, MlpWeights, Tensor};
use rayon::prelude::*;

use crate::decoder::{uniform_source, weights_fingerprint};
use crate::latent::{LatentBrdf, LatentVector, LATENT_DIM};
use crate::Error;

pub const SAMPLER_INPUT: usize = LATENT_DIM + 3;
pub const SAMPLER_HIDDEN: [usize; 4] = [128, 512, 128, 32];
pub const SIGMA_MIN: f64 = 1e-3;
/// Rejection attempts before the Gaussian branch falls back to Lambertian.
pub const MAX_ATTEMPTS: usize = 64;

/// Bin masses of the generalized NDF over `[-1,1]²` in projected-half-vector
/// space, row-major with `hy` as the row. Sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GndfTable {
    pub config: GndfConfig,
    pub values: Vec<f64>,
}

impl GndfTable {
    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.resolution() as f64
    }

    pub fn bin_center(&self, ix: usize, iy: usize) -> ProjectedHalfVector {
        let w = self.bin_width();
        ProjectedHalfVector { hx: -1.0 + (ix as f64 + 0.5) * w, hy: -1.0 + (iy as f64 + 0.5) * w }
    }

    /// Bins whose centers lie inside the unit disk, as `(index, center)`.
    pub fn disk_bins(&self) -> Vec<(usize, ProjectedHalfVector)> {
        let r = self.resolution();
        (0..r * r)
            .map(|i| (i, self.bin_center(i % r, i / r)))
            .filter(|(_, c)| c.radius_squared() < 1.0)
            .collect()
    }

    /// Mass per unit projected area.
    pub fn density(&self, i: usize) -> f64 {
        self.values[i] / (self.bin_width() * self.bin_width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GndfConfig {
    pub resolution: usize,
    pub wi_theta: usize,
    pub wi_phi: usize,
}

impl Default for GndfConfig {
    fn default() -> Self {
        Self { resolution: 40, wi_theta: 40, wi_phi: 40 }
    }
}

/// Averages the BRDF over a stratified grid of incoming directions in
/// projected-half-vector space. For every `wi` the outgoing directions are
/// the mirrors of the bin-center half vectors, each weighted by its solid
/// angle `A_bin · 4|ωo·h| / cosθh`.
pub fn compute_gndf(eval: &(dyn Fn(Direction, Direction) -> f64 + Sync), cfg: &GndfConfig) -> Result<GndfTable, Error> {
    let r = cfg.resolution;
    if r < 8 {
        return Err(Error::EmptyInput(format!("GNDF resolution {r} below 8")));
    }
    let mut table = GndfTable { config: *cfg, values: vec![0.0; r * r] };
    let bins = table.disk_bins();
    let area = table.bin_width() * table.bin_width();
    let lifted: Vec<(usize, Direction)> = bins.iter().map(|&(i, c)| (i, c.lift().unwrap())).collect();
    let wis = stratified_hemisphere_grid(cfg.wi_theta, cfg.wi_phi);
    // fixed chunking keeps the summation order independent of the thread count
    let partials: Vec<Vec<f64>> = wis
        .par_chunks(cfg.wi_phi.max(1))
        .map(|chunk| {
            let mut acc = vec![0.0; r * r];
            for &wi in chunk {
                for &(i, h) in &lifted {
                    let wo = reflect(wi, h);
                    if wo.z <= 0.0 {
                        continue;
                    }
                    let f = eval(wi, wo);
                    if f.is_finite() && f > 0.0 {
                        acc[i] += f * area * 4.0 * wo.dot(h) / h.z;
                    }
                }
            }
            acc
        })
        .collect();
    for p in partials {
        for (a, b) in table.values.iter_mut().zip(p) {
            *a += b;
        }
    }
    let total: f64 = table.values.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::AllZeroGndf);
    }
    for v in &mut table.values {
        *v /= total;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyParams {
    pub sigma: f64,
    pub w: f64,
}

/// Gaussian of width `sigma` normalized on the disk `r² < c_max`.
#[inline]
fn truncated_gaussian(r2: f64, sigma: f64, c_max: f64) -> f64 {
    let s2 = sigma * sigma;
    (-r2 / (2.0 * s2)).exp() / (2.0 * PI * s2 * -(-c_max / (2.0 * s2)).exp_m1())
}

/// `∂ ln G/∂σ` for `truncated_gaussian`.
fn truncated_gaussian_dlog(r2: f64, sigma: f64, c_max: f64) -> f64 {
    let s3 = sigma * sigma * sigma;
    let e = (-c_max / (2.0 * sigma * sigma)).exp();
    r2 / s3 - 2.0 / sigma + c_max * e / (s3 * (1.0 - e))
}

/// Unit-disk normalized Gaussian `Ĝ_σ`.
pub fn disk_gaussian(hx: f64, hy: f64, sigma: f64) -> f64 {
    truncated_gaussian(hx * hx + hy * hy, sigma, 1.0)
}

/// Fraction of `Ĝ_σ` whose mirrored direction about `wi` stays above the
/// horizon. Exact up to the radial quadrature.
pub fn gaussian_acceptance(sigma: f64, cos_theta_i: f64) -> f64 {
    let c = cos_theta_i.clamp(0.0, 1.0);
    let s = (1.0 - c * c).sqrt();
    let s2 = sigma * sigma;
    let mass = -(-1.0 / (2.0 * s2)).exp_m1();
    if s < 1e-12 {
        return -(-0.25 / s2).exp_m1() / mass;
    }
    const N: usize = 2048;
    let mut acc = 0.0;
    for k in 0..N {
        let u = (k as f64 + 0.5) / N as f64;
        let r2 = (-2.0 * s2 * (-u * mass).ln_1p()).min(1.0);
        let r = r2.sqrt();
        let hz = (1.0 - r2).max(0.0).sqrt();
        // valid iff cosφ > c(2r²−1) / (2 s r h_z)
        let bound = if r * hz > 0.0 { c * (2.0 * r2 - 1.0) / (2.0 * s * r * hz) } else if r2 < 0.5 { -2.0 } else { 2.0 };
        acc += bound.clamp(-1.0, 1.0).acos() / PI;
    }
    acc / N as f64
}

const ACCEPT_TABLE: usize = 257;

/// Proxy density with its per-incidence acceptance table. The Gaussian lobe
/// is renormalized over half vectors that reflect above the horizon, so the
/// density integrates to one and equals the sampling density.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyPdf {
    pub params: ProxyParams,
    accept: Vec<f64>,
}

impl ProxyPdf {
    pub fn new(params: ProxyParams) -> Self {
        let accept = (0..ACCEPT_TABLE).map(|k| gaussian_acceptance(params.sigma, k as f64 / (ACCEPT_TABLE - 1) as f64)).collect();
        Self { params, accept }
    }

    /// Interpolated acceptance over `cosθi`.
    pub fn acceptance(&self, cos_theta_i: f64) -> f64 {
        let x = cos_theta_i.clamp(0.0, 1.0) * (ACCEPT_TABLE - 1) as f64;
        let k = (x as usize).min(ACCEPT_TABLE - 2);
        let t = x - k as f64;
        self.accept[k] * (1.0 - t) + self.accept[k + 1] * t
    }

    /// Density per steradian of `ωo`.
    pub fn pdf(&self, wi: Direction, wo: Direction) -> f64 {
        let ProxyParams { sigma, w } = self.params;
        let lambert = w * wo.z.max(0.0) * FRAC_1_PI;
        if wo.z <= 0.0 || w >= 1.0 {
            return lambert;
        }
        let Ok(h) = half_vector(wi, wo) else { return lambert };
        let c = wo.dot(h).abs();
        if c < 1e-9 {
            return lambert;
        }
        let p = ProjectedHalfVector::from_half(h);
        let a = self.acceptance(wi.z);
        if !(a > 0.0) {
            return lambert;
        }
        lambert + (1.0 - w) * disk_gaussian(p.hx, p.hy, sigma) / a * h.z.abs() / (4.0 * c)
    }

    /// Draws `ωo` and returns it with its density.
    pub fn sample(&self, wi: Direction, rng: &mut RngStream) -> (Direction, f64) {
        let ProxyParams { sigma, w } = self.params;
        let lambert = |rng: &mut RngStream| {
            let (a, b) = rng.next_2d();
            sample_cosine_hemisphere(a, b)
        };
        let mut wo = None;
        if rng.next_f64() >= w {
            let s2 = sigma * sigma;
            let mass = -(-1.0 / (2.0 * s2)).exp_m1();
            for _ in 0..MAX_ATTEMPTS {
                let (u1, u2) = rng.next_2d();
                let r2 = (-2.0 * s2 * (-u1 * mass).ln_1p()).min(1.0);
                let r = r2.sqrt();
                let phi = 2.0 * PI * u2;
                let h = Vec3::new(r * phi.cos(), r * phi.sin(), (1.0 - r2).max(0.0).sqrt());
                let d = reflect(wi, h);
                if d.z > 0.0 {
                    wo = Some(d.normalize());
                    break;
                }
            }
        }
        let mut wo = wo.unwrap_or_else(|| lambert(rng));
        let mut pdf = self.pdf(wi, wo);
        // only reachable through the cosine sampler landing on the horizon
        while !(pdf > 0.0) {
            wo = lambert(rng);
            pdf = self.pdf(wi, wo);
        }
        (wo, pdf)
    }
}

pub fn proxy_pdf(pdf: &ProxyPdf, wi: Direction, wo: Direction) -> Result<f64, Error> {
    if !(wi.z > 0.0) || wo.z < 0.0 {
        return Err(Error::InvalidDirection);
    }
    Ok(pdf.pdf(wi, wo))
}

pub fn sample_proxy(pdf: &ProxyPdf, wi: Direction, rng: &mut RngStream) -> Result<(Direction, f64), Error> {
    if !(wi.z > 0.0) {
        return Err(Error::InvalidDirection);
    }
    Ok(pdf.sample(wi, rng))
}

pub fn build_sampler_net() -> MlpGraph {
    let mut layers = Vec::new();
    let mut d = SAMPLER_INPUT;
    for h in SAMPLER_HIDDEN {
        layers.push(Layer::Linear { in_dim: d, out_dim: h });
        layers.push(Layer::Relu);
        d = h;
    }
    layers.push(Layer::Linear { in_dim: d, out_dim: 2 });
    MlpGraph::new(SAMPLER_INPUT, layers, vec![]).expect("static wiring is valid")
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps raw network outputs to `(σ, w)`.
pub fn squash(raw_sigma: f32, raw_w: f32) -> ProxyParams {
    ProxyParams { sigma: softplus(raw_sigma as f64) + SIGMA_MIN, w: sigmoid(raw_w as f64) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerNet {
    pub graph: MlpGraph,
    pub weights: MlpWeights<f32>,
    /// Side of the `wi` grid the outputs are averaged over.
    pub wi_side: usize,
}

fn sampler_input(z: &LatentVector, wis: &[Direction]) -> Tensor<f32> {
    let mut x = Vec::with_capacity(wis.len() * SAMPLER_INPUT);
    for wi in wis {
        x.extend_from_slice(z);
        x.extend_from_slice(&wi.as_f32());
    }
    Tensor { shape: vec![wis.len(), SAMPLER_INPUT], data: x }
}

impl SamplerNet {
    pub fn init(seed: u64, wi_side: usize) -> Self {
        let graph = build_sampler_net();
        let weights = graph.init_weights(uniform_source(seed, 0x5a3));
        Self { graph, weights, wi_side }
    }

    pub fn load(path: &Path, wi_side: usize) -> Result<Self, Error> {
        let graph = build_sampler_net();
        let weights = load_weights(path, &graph)?;
        Ok(Self { graph, weights, wi_side })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        Ok(save_weights(path, &self.graph, &self.weights)?)
    }

    pub fn fingerprint(&self) -> u64 {
        weights_fingerprint(&self.graph, &self.weights)
    }

    fn wis(&self) -> Vec<Direction> {
        stratified_hemisphere_grid(self.wi_side, self.wi_side)
    }

    /// Per-`wi` parameters for one latent.
    pub fn params_per_wi(&self, z: &LatentVector) -> Vec<ProxyParams> {
        let out = infer(&self.graph, &self.weights, &sampler_input(z, &self.wis())).expect("sampler shapes are static");
        out.data.chunks_exact(2).map(|r| squash(r[0], r[1])).collect()
    }
}

/// Averages the network's `(σ, w)` over the `wi` grid and over channels.
/// Independent of any render-time direction.
pub fn fit_params(net: &SamplerNet, latent: &LatentBrdf) -> ProxyParams {
    let (mut s, mut w, mut n) = (0.0, 0.0, 0usize);
    for z in latent.channels() {
        for p in net.params_per_wi(z) {
            s += p.sigma;
            w += p.w;
            n += 1;
        }
    }
    ProxyParams { sigma: s / n as f64, w: w / n as f64 }
}

/// Fitted parameters keyed by latent hash, filled on first use.
#[derive(Debug, Default)]
pub struct ProxyCache {
    map: RwLock<HashMap<u64, ProxyParams>>,
}

pub const CACHE_MAGIC: &[u8; 4] = b"NBPX";

impl ProxyCache {
    pub fn get(&self, net: &SamplerNet, latent: &LatentBrdf) -> ProxyParams {
        let key = latent.key();
        if let Some(p) = self.map.read().unwrap().get(&key) {
            return *p;
        }
        let p = fit_params(net, latent);
        *self.map.write().unwrap().entry(key).or_insert(p)
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `NBPX`, u32 version, u32 count, then `(u64 key, f64 σ, f64 w)` sorted by key.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), Error> {
        let map = self.map.read().unwrap();
        let mut entries: Vec<_> = map.iter().collect();
        entries.sort_by_key(|e| *e.0);
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u32::<LittleEndian>(entries.len() as u32)?;
        for (k, p) in entries {
            w.write_u64::<LittleEndian>(*k)?;
            w.write_f64::<LittleEndian>(p.sigma)?;
            w.write_f64::<LittleEndian>(p.w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, Error> {
        let eof = crate::eof;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != CACHE_MAGIC || r.read_u32::<LittleEndian>().map_err(eof)? != 1 {
            return Err(Error::Format("not a proxy parameter cache".into()));
        }
        let n = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut map = HashMap::new();
        for _ in 0..n {
            let k = r.read_u64::<LittleEndian>().map_err(eof)?;
            let sigma = r.read_f64::<LittleEndian>().map_err(eof)?;
            let w = r.read_f64::<LittleEndian>().map_err(eof)?;
            map.insert(k, ProxyParams { sigma, w });
        }
        Ok(Self { map: RwLock::new(map) })
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

/// The GNDF of a constant BRDF, i.e. the Lambertian lobe in
/// projected-half-vector space under the same averaging.
pub fn lambert_gndf(cfg: &GndfConfig) -> GndfTable {
    compute_gndf(&|_, _| FRAC_1_PI, cfg).expect("constant BRDF has mass")
}

/// GNDF bins prepared for the KLD objective. Both distributions are
/// compared as densities over the projected-half-vector disk: the Gaussian
/// directly and the Lambertian term through its own GNDF.
#[derive(Debug, Clone)]
pub struct KldTarget {
    r2: Vec<f64>,
    lambert: Vec<f64>,
    gt: Vec<f64>,
}

impl KldTarget {
    pub fn new(g: &GndfTable, lambert: &GndfTable) -> Self {
        assert_eq!(g.config, lambert.config, "GNDF tables disagree on configuration");
        let bins = g.disk_bins();
        Self {
            r2: bins.iter().map(|(_, c)| c.radius_squared()).collect(),
            lambert: bins.iter().map(|&(i, _)| lambert.density(i)).collect(),
            gt: bins.iter().map(|&(i, _)| g.density(i)).collect(),
        }
    }

    /// Proxy density at every bin.
    pub fn predict(&self, p: ProxyParams) -> Vec<f64> {
        self.r2.iter().zip(&self.lambert).map(|(&r2, &l)| (1.0 - p.w) * truncated_gaussian(r2, p.sigma, 1.0) + p.w * l).collect()
    }

    /// Loss and its gradient with respect to `(σ, w)`.
    pub fn loss(&self, p: ProxyParams) -> Result<(f64, f64, f64), Error> {
        let pred = self.predict(p);
        let (loss, grad) = kld_loss(&pred, &self.gt)?;
        let (mut gs, mut gw) = (0.0, 0.0);
        for ((&g, &r2), &l) in grad.iter().zip(&self.r2).zip(&self.lambert) {
            let gauss = truncated_gaussian(r2, p.sigma, 1.0);
            gs += g * (1.0 - p.w) * gauss * truncated_gaussian_dlog(r2, p.sigma, 1.0);
            gw += g * (l - gauss);
        }
        Ok((loss, gs, gw))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub wi_side: usize,
    pub seed: u64,
}

impl SamplerTrainConfig {
    pub fn desk() -> Self {
        Self { epochs: 10, lr: 3e-5, lr_decay: 0.7, decay_every: 3, wi_side: 20, seed: 1 }
    }

    pub fn paper() -> Self {
        Self { wi_side: 40, ..Self::desk() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub kld: f64,
    pub seconds: f64,
}

/// Fits the sampling network to GNDF targets by averaging its outputs over
/// the `wi` grid and matching the averaged proxy to the GNDF under KLD.
pub fn train_sampler(
    items: &[(LatentVector, GndfTable)],
    cfg: &SamplerTrainConfig,
    mut on_epoch: impl FnMut(&SamplerEpoch, &SamplerNet) -> Result<(), Error>,
) -> Result<(SamplerNet, Vec<SamplerEpoch>), Error> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no sampler training items".into()));
    }
    let mut net = SamplerNet::init(cfg.seed, cfg.wi_side);
    let wis = net.wis();
    let n = wis.len() as f64;
    let mut lamberts: Vec<GndfTable> = Vec::new();
    let mut targets = Vec::with_capacity(items.len());
    for (_, g) in items {
        if !lamberts.iter().any(|l| l.config == g.config) {
            lamberts.push(lambert_gndf(&g.config));
        }
        targets.push(KldTarget::new(g, lamberts.iter().find(|l| l.config == g.config).unwrap()));
    }
    let mut opt = AdamState::<f32>::new(net.graph.param_count(), AdamConfig::with_lr(cfg.lr));
    let mut rng = RngStream::new(cfg.seed, 0x5a4);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        opt.config.lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every.max(1)) as i32);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let mut sum = 0.0;
        for &k in &order {
            let x = sampler_input(&items[k].0, &wis);
            let (raw, saved) = forward(&net.graph, &net.weights, &x)?;
            let per: Vec<ProxyParams> = raw.data.chunks_exact(2).map(|r| squash(r[0], r[1])).collect();
            let mean = ProxyParams {
                sigma: per.iter().map(|p| p.sigma).sum::<f64>() / n,
                w: per.iter().map(|p| p.w).sum::<f64>() / n,
            };
            let (loss, gs, gw) = targets[k].loss(mean)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { stage: "sampler", epoch });
            }
            sum += loss;
            let up: Vec<f32> = raw
                .data
                .chunks_exact(2)
                .zip(&per)
                .flat_map(|(r, p)| [(gs / n * sigmoid(r[0] as f64)) as f32, (gw / n * p.w * (1.0 - p.w)) as f32])
                .collect();
            let g = backward(&net.graph, &net.weights, &saved, &Tensor { shape: raw.shape, data: up }, true)?;
            opt.step(&mut net.weights.data, g.params.as_ref().unwrap())?;
        }
        let stats = SamplerEpoch { epoch: epoch + 1, lr: opt.config.lr, kld: sum / items.len() as f64, seconds: t0.elapsed().as_secs_f64() };
        on_epoch(&stats, &net)?;
        history.push(stats);
    }
    Ok((net, history))
}

/// `∫ pdf dωo` by an `n × n` midpoint rule over the full sphere in polar
/// coordinates around the mirror direction of `wi`, where the lobe sits.
pub fn integrate_pdf(pdf: &ProxyPdf, wi: Direction, n: usize) -> f64 {
    let axis = Vec3::new(-wi.x, -wi.y, wi.z);
    let (t, b) = nbrdf_core::math::orthonormal_basis(axis);
    let dt = PI / n as f64;
    let dp = 2.0 * PI / n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let (st, ct) = ((i as f64 + 0.5) * dt).sin_cos();
        for j in 0..n {
            let (sp, cp) = ((j as f64 + 0.5) * dp).sin_cos();
            let wo = t * (st * cp) + b * (st * sp) + axis * ct;
            if wo.z > 0.0 {
                s += pdf.pdf(wi, wo) * st;
            }
        }
    }
    s * dt * dp
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson test of `n_samples` draws against the density on `bins × bins`
/// uniform `(θ, φ)` cells. Cells expecting fewer than five draws are pooled.
pub fn chi_square_test(pdf: &ProxyPdf, wi: Direction, n_samples: usize, bins: usize, rng: &mut RngStream) -> ChiSquare {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dt = std::f64::consts::FRAC_PI_2 / bins as f64;
    let dp = 2.0 * PI / bins as f64;
    let mut observed = vec![0f64; bins * bins];
    for _ in 0..n_samples {
        let (wo, _) = pdf.sample(wi, rng);
        let t = ((wo.z.clamp(-1.0, 1.0).acos() / dt) as usize).min(bins - 1);
        let p = ((wo.y.atan2(wo.x).rem_euclid(2.0 * PI) / dp) as usize).min(bins - 1);
        observed[t * bins + p] += 1.0;
    }
    const SUB: usize = 8;
    let mut expected = vec![0f64; bins * bins];
    for t in 0..bins {
        for p in 0..bins {
            let mut s = 0.0;
            for a in 0..SUB {
                let theta = (t as f64 + (a as f64 + 0.5) / SUB as f64) * dt;
                for b in 0..SUB {
                    let phi = (p as f64 + (b as f64 + 0.5) / SUB as f64) * dp;
                    let wo = nbrdf_core::math::spherical_to_dir(theta, phi);
                    s += pdf.pdf(wi, wo) * theta.sin();
                }
            }
            expected[t * bins + p] = s * dt * dp / (SUB * SUB) as f64 * n_samples as f64;
        }
    }
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        if *e < 5.0 {
            pool_o += o;
            pool_e += e;
        } else {
            stat += (o - e) * (o - e) / e;
            cells += 1;
        }
    }
    if pool_e >= 5.0 {
        stat += (pool_o - pool_e) * (pool_o - pool_e) / pool_e;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    let p_value = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    ChiSquare { statistic: stat, dof, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_mass_closed_form() {
        let m: f64 = 1.0 - (-1.0f64 / (2.0 * 0.04)).exp();
        assert!((m - 0.9999963).abs() < 1e-7);
        // the normalized Gaussian integrates to one over the disk
        let n = 2000;
        let mut s = 0.0;
        for i in 0..n {
            let r = (i as f64 + 0.5) / n as f64;
            s += disk_gaussian(r, 0.0, 0.3) * 2.0 * PI * r / n as f64;
        }
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pure_lambertian() {
        let p = ProxyPdf::new(ProxyParams { sigma: 0.3, w: 1.0 });
        assert!((p.pdf(Vec3::Z, Vec3::Z) - FRAC_1_PI).abs() < 1e-15);
        let wo = Vec3::new(0.6, 0.0, 0.8);
        assert!((p.pdf(Vec3::new(0.0, 0.6, 0.8), wo) - 0.8 * FRAC_1_PI).abs() < 1e-15);
    }

    #[test]
    fn acceptance_at_normal_incidence() {
        for s in [0.05, 0.3, 1.0] {
            let exact = gaussian_acceptance(s, 1.0);
            assert!((gaussian_acceptance(s, 1.0 - 1e-9) - exact).abs() < 1e-3, "σ={s}");
        }
        assert!(gaussian_acceptance(0.02, 0.2) > 0.999);
    }

    #[test]
    fn kld_gradient_matches_differences() {
        let cfg = GndfConfig { resolution: 16, wi_theta: 4, wi_phi: 4 };
        let mut g = GndfTable { config: cfg, values: vec![0.0; 256] };
        for (i, c) in g.disk_bins() {
            g.values[i] = (-c.radius_squared() / 0.1).exp();
        }
        let s: f64 = g.values.iter().sum();
        g.values.iter_mut().for_each(|v| *v /= s);
        let t = KldTarget::new(&g, &lambert_gndf(&cfg));
        let p = ProxyParams { sigma: 0.35, w: 0.4 };
        let (_, gs, gw) = t.loss(p).unwrap();
        let h = 1e-6;
        let f = |p| t.loss(p).unwrap().0;
        let ns = (f(ProxyParams { sigma: p.sigma + h, ..p }) - f(ProxyParams { sigma: p.sigma - h, ..p })) / (2.0 * h);
        let nw = (f(ProxyParams { w: p.w + h, ..p }) - f(ProxyParams { w: p.w - h, ..p })) / (2.0 * h);
        assert!((gs - ns).abs() < 1e-6 * (1.0 + ns.abs()), "{gs} {ns}");
        assert!((gw - nw).abs() < 1e-6 * (1.0 + nw.abs()), "{gw} {nw}");
    }

    #[test]
    fn sampler_wiring() {
        let g = build_sampler_net();
        assert_eq!(g.input_dim, 35);
        assert_eq!(g.output_dim(), 2);
        let widths: Vec<usize> = g.layers.iter().filter_map(|l| if let Layer::Linear { out_dim, .. } = l { Some(*out_dim) } else { None }).collect();
        assert_eq!(widths, vec![128, 512, 128, 32, 2]);
    }

    #[test]
    fn fitted_params_are_cached() {
        let net = SamplerNet::init(2, 4);
        let l = LatentBrdf::ones(3).unwrap();
        let cache = ProxyCache::default();
        let a = cache.get(&net, &l);
        assert_eq!(cache.len(), 1);
        assert_eq!(a, fit_params(&net, &l));
        assert_eq!(a, cache.get(&net, &l));
        assert!(a.sigma > SIGMA_MIN && (0.0..=1.0).contains(&a.w));
        let mut buf = Vec::new();
        cache.write(&mut buf).unwrap();
        assert_eq!(ProxyCache::read(&mut buf.as_slice()).unwrap().get(&net, &l), a);
    }
}
