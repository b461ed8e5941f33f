//! Tabulated BRDF corpus: parameter sampling, generation, and the `NBDS`
//! binary format. The byte layout is described in `docs/formats.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::analytic::{eval_conductor, eval_dielectric_reflect, ConductorParams, DielectricParams};
use crate::math::Direction;
use crate::oracle::{tabulate_layered, Bottom, GridSpec, LayerStack, MediumParams};
use crate::rng::{mix64, RngStream};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"NBDS";
pub const VERSION: u32 = 1;

pub const ALPHA_BASE: (f64, f64) = (0.216, 1.0);
pub const ETA_RANGE: (f64, f64) = (1.05, 2.0);
pub const SIGMA_T_SUPPORT: [f64; 4] = [0.0, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BrdfKind {
    Conductor = 0,
    Dielectric = 1,
    TwoLayer = 2,
    ThreeLayer = 3,
}

impl BrdfKind {
    pub const ALL: [BrdfKind; 4] = [BrdfKind::Conductor, BrdfKind::Dielectric, BrdfKind::TwoLayer, BrdfKind::ThreeLayer];

    pub fn from_tag(tag: u8) -> Result<Self, Error> {
        Self::ALL.get(tag as usize).copied().ok_or_else(|| Error::Format(format!("unknown record kind {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            BrdfKind::Conductor => "conductor",
            BrdfKind::Dielectric => "dielectric",
            BrdfKind::TwoLayer => "two_layer",
            BrdfKind::ThreeLayer => "three_layer",
        }
    }
}

/// Parameters of one tabulated BRDF.
///
/// Layered records remember which stored records supplied their components
/// (`top_ref` is a dielectric, `bottom_ref` a conductor or two-layer record)
/// so latent-space triples can be assembled later.
#[derive(Debug, Clone, PartialEq)]
pub enum BrdfParams {
    Conductor(ConductorParams),
    Dielectric(DielectricParams),
    Layered { stack: LayerStack, top_ref: Option<u32>, bottom_ref: Option<u32> },
}

impl BrdfParams {
    pub fn kind(&self) -> BrdfKind {
        match self {
            BrdfParams::Conductor(_) => BrdfKind::Conductor,
            BrdfParams::Dielectric(_) => BrdfKind::Dielectric,
            BrdfParams::Layered { stack, .. } => {
                if stack.depth() == 1 {
                    BrdfKind::TwoLayer
                } else {
                    BrdfKind::ThreeLayer
                }
            }
        }
    }

    /// Deterministic evaluation; layered parameters have no closed form.
    pub fn eval_analytic(&self, wi: Direction, wo: Direction) -> Option<f64> {
        match self {
            BrdfParams::Conductor(p) => Some(eval_conductor(p, wi, wo)),
            BrdfParams::Dielectric(p) => Some(eval_dielectric_reflect(p, wi, wo)),
            BrdfParams::Layered { .. } => None,
        }
    }

    /// Flat encoding stored in the file.
    ///
    /// conductor `[α, R₀]`; dielectric `[α, η]`; layered
    /// `[top_ref, bottom_ref, (α, η, A, σ_T) per level from the top, α, R₀]`
    /// with `-1` for a missing reference.
    pub fn to_array(&self) -> Vec<f64> {
        match self {
            BrdfParams::Conductor(p) => vec![p.alpha, p.r0],
            BrdfParams::Dielectric(p) => vec![p.alpha, p.eta],
            BrdfParams::Layered { stack, top_ref, bottom_ref } => {
                let r = |x: &Option<u32>| x.map_or(-1.0, |v| v as f64);
                let mut out = vec![r(top_ref), r(bottom_ref)];
                let mut s = stack;
                loop {
                    out.extend_from_slice(&[s.top.alpha, s.top.eta, s.medium.albedo, s.medium.sigma_t]);
                    match &s.bottom {
                        Bottom::Conductor(c) => {
                            out.extend_from_slice(&[c.alpha, c.r0]);
                            break;
                        }
                        Bottom::Layered(inner) => s = inner,
                    }
                }
                out
            }
        }
    }

    pub fn from_array(kind: BrdfKind, a: &[f64]) -> Result<Self, Error> {
        let bad = || Error::Format(format!("{} record has {} parameters", kind.name(), a.len()));
        match kind {
            BrdfKind::Conductor if a.len() == 2 => Ok(BrdfParams::Conductor(ConductorParams { alpha: a[0], r0: a[1] })),
            BrdfKind::Dielectric if a.len() == 2 => Ok(BrdfParams::Dielectric(DielectricParams { alpha: a[0], eta: a[1] })),
            BrdfKind::TwoLayer | BrdfKind::ThreeLayer => {
                let levels = if kind == BrdfKind::TwoLayer { 1 } else { 2 };
                if a.len() != 2 + 4 * levels + 2 {
                    return Err(bad());
                }
                let r = |x: f64| if x < 0.0 { None } else { Some(x as u32) };
                let n = a.len();
                let mut stack: Option<LayerStack> = None;
                for l in (0..levels).rev() {
                    let p = &a[2 + 4 * l..6 + 4 * l];
                    let top = DielectricParams { alpha: p[0], eta: p[1] };
                    let medium = MediumParams { albedo: p[2], sigma_t: p[3] };
                    stack = Some(match stack.take() {
                        None => LayerStack::two_layer(top, medium, ConductorParams { alpha: a[n - 2], r0: a[n - 1] }),
                        Some(inner) => LayerStack::nested(top, medium, inner),
                    });
                }
                Ok(BrdfParams::Layered { stack: stack.unwrap(), top_ref: r(a[0]), bottom_ref: r(a[1]) })
            }
            _ => Err(bad()),
        }
    }
}

pub fn sample_alpha(rng: &mut RngStream) -> f64 {
    (ALPHA_BASE.0 + (ALPHA_BASE.1 - ALPHA_BASE.0) * rng.next_f64()).powi(3)
}

pub fn sample_eta(rng: &mut RngStream) -> f64 {
    ETA_RANGE.0 + (ETA_RANGE.1 - ETA_RANGE.0) * rng.next_f64()
}

pub fn sample_r0(rng: &mut RngStream) -> f64 {
    rng.next_f64()
}

pub fn sample_albedo(rng: &mut RngStream) -> f64 {
    1.0 - rng.next_f64().powi(2)
}

pub fn sample_sigma_t(rng: &mut RngStream) -> f64 {
    SIGMA_T_SUPPORT[rng.below(SIGMA_T_SUPPORT.len() as u64) as usize]
}

pub fn sample_conductor(rng: &mut RngStream) -> ConductorParams {
    let alpha = sample_alpha(rng);
    ConductorParams { alpha, r0: sample_r0(rng) }
}

pub fn sample_dielectric(rng: &mut RngStream) -> DielectricParams {
    let alpha = sample_alpha(rng);
    DielectricParams { alpha, eta: sample_eta(rng) }
}

pub fn sample_medium(rng: &mut RngStream) -> MediumParams {
    let albedo = sample_albedo(rng);
    MediumParams { albedo, sigma_t: sample_sigma_t(rng) }
}

/// Fresh parameters of the given kind with independent components.
pub fn sample_params(kind: BrdfKind, rng: &mut RngStream) -> BrdfParams {
    match kind {
        BrdfKind::Conductor => BrdfParams::Conductor(sample_conductor(rng)),
        BrdfKind::Dielectric => BrdfParams::Dielectric(sample_dielectric(rng)),
        BrdfKind::TwoLayer => {
            let top = sample_dielectric(rng);
            let medium = sample_medium(rng);
            let bottom = sample_conductor(rng);
            BrdfParams::Layered { stack: LayerStack::two_layer(top, medium, bottom), top_ref: None, bottom_ref: None }
        }
        BrdfKind::ThreeLayer => {
            let inner = match sample_params(BrdfKind::TwoLayer, rng) {
                BrdfParams::Layered { stack, .. } => stack,
                _ => unreachable!(),
            };
            let top = sample_dielectric(rng);
            let medium = sample_medium(rng);
            BrdfParams::Layered { stack: LayerStack::nested(top, medium, inner), top_ref: None, bottom_ref: None }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Validation = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Record counts in `BrdfKind` order.
    pub counts: [u32; 4],
    pub seed: u64,
    pub grid: GridSpec,
    /// Monte Carlo paths per direction pair for layered records.
    pub paths_per_pair: u32,
    /// Fraction of each kind assigned to the validation split.
    pub validation_fraction: f64,
}

impl DatasetManifest {
    pub fn desk() -> Self {
        Self {
            counts: [50, 50, 400, 60],
            seed: 1,
            grid: GridSpec::new(12, 24),
            paths_per_pair: 512,
            validation_fraction: 0.1,
        }
    }

    pub fn paper() -> Self {
        Self {
            counts: [300, 300, 12_720, 1_800],
            seed: 1,
            grid: GridSpec::new(25, 25),
            paths_per_pair: 512,
            validation_fraction: 0.1,
        }
    }

    pub fn total_records(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    /// Index of the first record of `kind`; records are stored grouped by kind.
    pub fn first_index(&self, kind: BrdfKind) -> usize {
        self.counts[..kind as usize].iter().map(|&c| c as usize).sum()
    }

    /// Deterministic split: each kind holds out the records whose keyed
    /// rank falls in the last `validation_fraction` of its group.
    pub fn split_of(&self, index: usize) -> Split {
        let mut start = 0usize;
        for (k, &c) in self.counts.iter().enumerate() {
            let c = c as usize;
            if index < start + c {
                let n_val = ((c as f64) * self.validation_fraction).round() as usize;
                let key = mix64(self.seed ^ mix64(0x5917 + k as u64));
                let rank = KeyedPermutation::new(c as u64, key).get((index - start) as u64) as usize;
                return if rank >= c - n_val { Split::Validation } else { Split::Train };
            }
            start += c;
        }
        Split::Train
    }

    fn validate(&self) -> Result<(), Error> {
        if self.grid.n_theta == 0 || self.grid.n_phi == 0 {
            return Err(Error::Format("empty direction grid".into()));
        }
        if self.paths_per_pair == 0 {
            return Err(Error::Format("paths_per_pair must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.validation_fraction) {
            return Err(Error::Format("validation_fraction outside [0, 1]".into()));
        }
        if self.counts[2] > 0 && (self.counts[0] == 0 || self.counts[1] == 0) {
            return Err(Error::Format("two-layer records need conductor and dielectric components".into()));
        }
        if self.counts[3] > 0 && (self.counts[1] == 0 || self.counts[2] == 0) {
            return Err(Error::Format("three-layer records need dielectric and two-layer components".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrdfRecord {
    pub params: BrdfParams,
    pub split: Split,
    /// `grid.pairs()` values in (in θ-major, out θ-major) order.
    pub values: Vec<f32>,
}

impl BrdfRecord {
    pub fn kind(&self) -> BrdfKind {
        self.params.kind()
    }
}

/// Tabulates closed-form parameters over every grid pair.
pub fn tabulate_analytic(params: &BrdfParams, grid: GridSpec) -> Vec<f32> {
    let dirs = grid.directions();
    let mut out = Vec::with_capacity(dirs.len() * dirs.len());
    for &wi in &dirs {
        for &wo in &dirs {
            out.push(params.eval_analytic(wi, wo).unwrap_or(0.0) as f32);
        }
    }
    out
}

/// Tabulated values for any parameter set.
pub fn tabulate_params(params: &BrdfParams, grid: GridSpec, paths_per_pair: usize, seed: u64) -> Result<Vec<f32>, Error> {
    match params {
        BrdfParams::Layered { stack, .. } => tabulate_layered(stack, grid, paths_per_pair, seed),
        _ => Ok(tabulate_analytic(params, grid)),
    }
}

/// Parameters of every record, without tabulating. Layered records combine
/// components drawn from the stored conductor, dielectric and two-layer pools.
pub fn plan_records(manifest: &DatasetManifest) -> Vec<BrdfParams> {
    let mut out: Vec<BrdfParams> = Vec::with_capacity(manifest.total_records());
    for kind in BrdfKind::ALL {
        for i in 0..manifest.counts[kind as usize] as u64 {
            let mut rng = RngStream::new(manifest.seed, ((kind as u64) << 32) | i);
            let p = match kind {
                BrdfKind::Conductor => BrdfParams::Conductor(sample_conductor(&mut rng)),
                BrdfKind::Dielectric => BrdfParams::Dielectric(sample_dielectric(&mut rng)),
                BrdfKind::TwoLayer => {
                    let t = manifest.first_index(BrdfKind::Dielectric) + rng.below(manifest.counts[1] as u64) as usize;
                    let b = manifest.first_index(BrdfKind::Conductor) + rng.below(manifest.counts[0] as u64) as usize;
                    let (top, bottom) = match (&out[t], &out[b]) {
                        (BrdfParams::Dielectric(d), BrdfParams::Conductor(c)) => (*d, *c),
                        _ => unreachable!(),
                    };
                    let medium = sample_medium(&mut rng);
                    BrdfParams::Layered {
                        stack: LayerStack::two_layer(top, medium, bottom),
                        top_ref: Some(t as u32),
                        bottom_ref: Some(b as u32),
                    }
                }
                BrdfKind::ThreeLayer => {
                    let t = manifest.first_index(BrdfKind::Dielectric) + rng.below(manifest.counts[1] as u64) as usize;
                    let b = manifest.first_index(BrdfKind::TwoLayer) + rng.below(manifest.counts[2] as u64) as usize;
                    let (top, inner) = match (&out[t], &out[b]) {
                        (BrdfParams::Dielectric(d), BrdfParams::Layered { stack, .. }) => (*d, stack.clone()),
                        _ => unreachable!(),
                    };
                    let medium = sample_medium(&mut rng);
                    BrdfParams::Layered {
                        stack: LayerStack::nested(top, medium, inner),
                        top_ref: Some(t as u32),
                        bottom_ref: Some(b as u32),
                    }
                }
            };
            out.push(p);
        }
    }
    out
}

pub struct DatasetHeader {
    pub manifest: DatasetManifest,
    pub record_count: u64,
}

fn write_header<W: Write>(w: &mut W, m: &DatasetManifest, record_count: u64) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(m.seed)?;
    for c in m.counts {
        w.write_u32::<LittleEndian>(c)?;
    }
    w.write_u32::<LittleEndian>(m.grid.n_theta as u32)?;
    w.write_u32::<LittleEndian>(m.grid.n_phi as u32)?;
    w.write_u32::<LittleEndian>(m.paths_per_pair)?;
    w.write_f64::<LittleEndian>(m.validation_fraction)?;
    w.write_u64::<LittleEndian>(record_count)
}

fn write_record<W: Write>(w: &mut W, r: &BrdfRecord) -> std::io::Result<()> {
    let params = r.params.to_array();
    w.write_u8(r.kind() as u8)?;
    w.write_u8(r.split as u8)?;
    w.write_u16::<LittleEndian>(params.len() as u16)?;
    for p in params {
        w.write_f64::<LittleEndian>(p)?;
    }
    w.write_u32::<LittleEndian>(r.values.len() as u32)?;
    for v in &r.values {
        w.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

/// Writes the full corpus. Records are tabulated one at a time (each layered
/// tabulation is parallel internally) and appended in index order, so the
/// file is identical for a given manifest regardless of thread count.
pub fn generate_dataset(
    manifest: &DatasetManifest,
    path: &Path,
    mut progress: impl FnMut(usize, usize),
) -> Result<(), Error> {
    manifest.validate()?;
    let plan = plan_records(manifest);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, manifest, plan.len() as u64)?;
    let analytic_end = manifest.first_index(BrdfKind::TwoLayer);
    let analytic: Vec<Vec<f32>> = plan[..analytic_end].par_iter().map(|p| tabulate_analytic(p, manifest.grid)).collect();
    for (i, (params, values)) in plan[..analytic_end].iter().zip(analytic).enumerate() {
        write_record(&mut w, &BrdfRecord { params: params.clone(), split: manifest.split_of(i), values })?;
        progress(i + 1, plan.len());
    }
    for (i, params) in plan.iter().enumerate().skip(analytic_end) {
        let values = tabulate_params(params, manifest.grid, manifest.paths_per_pair as usize, record_seed(manifest.seed, i))?;
        write_record(&mut w, &BrdfRecord { params: params.clone(), split: manifest.split_of(i), values })?;
        progress(i + 1, plan.len());
    }
    w.flush()?;
    Ok(())
}

pub fn record_seed(seed: u64, index: usize) -> u64 {
    mix64(seed ^ mix64(index as u64 + 1))
}

/// An in-memory corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<BrdfRecord>,
}

fn truncation(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::TruncatedFile
    } else {
        Error::Io(e)
    }
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, Error> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncation)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncation)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(truncation)?;
        let mut counts = [0u32; 4];
        for c in counts.iter_mut() {
            *c = r.read_u32::<LittleEndian>().map_err(truncation)?;
        }
        let n_theta = r.read_u32::<LittleEndian>().map_err(truncation)? as usize;
        let n_phi = r.read_u32::<LittleEndian>().map_err(truncation)? as usize;
        let paths_per_pair = r.read_u32::<LittleEndian>().map_err(truncation)?;
        let validation_fraction = r.read_f64::<LittleEndian>().map_err(truncation)?;
        let record_count = r.read_u64::<LittleEndian>().map_err(truncation)?;
        let manifest = DatasetManifest { counts, seed, grid: GridSpec::new(n_theta, n_phi), paths_per_pair, validation_fraction };
        if record_count as usize != manifest.total_records() {
            return Err(Error::Format("record count disagrees with manifest counts".into()));
        }
        let pairs = manifest.grid.pairs();
        let mut records = Vec::with_capacity(record_count as usize);
        for _ in 0..record_count {
            let kind = BrdfKind::from_tag(r.read_u8().map_err(truncation)?)?;
            let split = match r.read_u8().map_err(truncation)? {
                0 => Split::Train,
                1 => Split::Validation,
                s => return Err(Error::Format(format!("unknown split tag {s}"))),
            };
            let n_params = r.read_u16::<LittleEndian>().map_err(truncation)? as usize;
            let mut params = vec![0.0; n_params];
            r.read_f64_into::<LittleEndian>(&mut params).map_err(truncation)?;
            let n_values = r.read_u32::<LittleEndian>().map_err(truncation)? as usize;
            if n_values != pairs {
                return Err(Error::Format(format!("record has {n_values} values, grid has {pairs} pairs")));
            }
            let mut values = vec![0.0f32; n_values];
            r.read_f32_into::<LittleEndian>(&mut values).map_err(truncation)?;
            records.push(BrdfRecord { params: BrdfParams::from_array(kind, &params)?, split, values });
        }
        Ok(Dataset { manifest, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, &self.manifest, self.records.len() as u64)?;
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        self.manifest.grid
    }

    pub fn indices(&self, filter: impl Fn(&BrdfRecord) -> bool) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| filter(r)).map(|(i, _)| i).collect()
    }

    /// Shuffled mini-batches over every (record, pair) of the chosen records.
    pub fn batches(&self, records: Vec<usize>, batch_size: usize, shuffle_seed: u64) -> BatchIter<'_> {
        BatchIter { dataset: self, cursor: BatchCursor::new(self, records, batch_size, shuffle_seed) }
    }
}

/// One stored sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub record: usize,
    /// Index into the record's values.
    pub pair: usize,
    pub wi: Direction,
    pub wo: Direction,
    pub value: f32,
}

/// Epoch position over a shuffled sample set.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    dirs: Vec<Direction>,
    records: Vec<usize>,
    perm: KeyedPermutation,
    next: u64,
    batch_size: usize,
}

impl BatchCursor {
    pub fn new(ds: &Dataset, records: Vec<usize>, batch_size: usize, shuffle_seed: u64) -> Self {
        let pairs = ds.grid().pairs() as u64;
        let total = records.len() as u64 * pairs;
        Self {
            dirs: ds.grid().directions(),
            records,
            perm: KeyedPermutation::new(total, shuffle_seed),
            next: 0,
            batch_size: batch_size.max(1),
        }
    }

    pub fn total(&self) -> u64 {
        self.perm.len()
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Option<Vec<Sample>> {
        if self.next >= self.perm.len() {
            return None;
        }
        let n = self.dirs.len();
        let pairs = n * n;
        let end = (self.next + self.batch_size as u64).min(self.perm.len());
        let batch = (self.next..end)
            .map(|k| {
                let j = self.perm.get(k) as usize;
                let record = self.records[j / pairs];
                let pair = j % pairs;
                Sample { record, pair, wi: self.dirs[pair / n], wo: self.dirs[pair % n], value: ds.records[record].values[pair] }
            })
            .collect();
        self.next = end;
        Some(batch)
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    cursor: BatchCursor,
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Vec<Sample>> {
        self.cursor.next_batch(self.dataset)
    }
}

/// Batches over every sample of a dataset file, owning the loaded data.
pub struct FileBatches {
    pub dataset: Dataset,
    cursor: BatchCursor,
}

impl Iterator for FileBatches {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Vec<Sample>> {
        self.cursor.next_batch(&self.dataset)
    }
}

pub fn load_batches(path: &Path, batch_size: usize, shuffle_seed: u64) -> Result<FileBatches, Error> {
    let dataset = Dataset::load(path)?;
    let all = (0..dataset.records.len()).collect();
    let cursor = BatchCursor::new(&dataset, all, batch_size, shuffle_seed);
    Ok(FileBatches { dataset, cursor })
}

/// Keyed bijection on `[0, n)`: a four-round Feistel network on the smallest
/// enclosing power-of-four domain with cycle walking. Constant memory.
#[derive(Debug, Clone)]
pub struct KeyedPermutation {
    n: u64,
    half_bits: u32,
    keys: [u64; 4],
}

impl KeyedPermutation {
    pub fn new(n: u64, key: u64) -> Self {
        let bits = 64 - n.max(2).saturating_sub(1).leading_zeros();
        let half_bits = bits.div_ceil(2).max(1);
        let mut keys = [0u64; 4];
        for (i, k) in keys.iter_mut().enumerate() {
            *k = mix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        }
        Self { n, half_bits, keys }
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn round(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut l, mut r) = (x >> self.half_bits, x & mask);
        for k in self.keys {
            let f = mix64(r ^ k) & mask;
            (l, r) = (r, l ^ f);
        }
        (l << self.half_bits) | r
    }

    pub fn get(&self, i: u64) -> u64 {
        debug_assert!(i < self.n);
        let mut x = self.round(i);
        while x >= self.n {
            x = self.round(x);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetManifest {
        DatasetManifest { counts: [3, 3, 4, 2], seed: 9, grid: GridSpec::new(2, 3), paths_per_pair: 4, validation_fraction: 0.25 }
    }

    #[test]
    fn alpha_range() {
        let mut rng = RngStream::new(0, 0);
        for _ in 0..10_000 {
            let a = sample_alpha(&mut rng);
            assert!((0.216f64.powi(3)..=1.0).contains(&a));
        }
        assert!((0.216f64.powi(3) - 0.010078).abs() < 1e-6);
    }

    #[test]
    fn sigma_t_support() {
        let mut rng = RngStream::new(0, 1);
        let mut seen = [false; 4];
        for _ in 0..1000 {
            let s = sample_sigma_t(&mut rng);
            let k = SIGMA_T_SUPPORT.iter().position(|&v| v == s).expect("outside support");
            seen[k] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn permutation_is_bijective() {
        for &n in &[1u64, 2, 3, 17, 1000, 4097] {
            let p = KeyedPermutation::new(n, 42);
            let mut hit = vec![false; n as usize];
            for i in 0..n {
                let j = p.get(i) as usize;
                assert!(!hit[j]);
                hit[j] = true;
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = RngStream::new(5, 5);
        for kind in BrdfKind::ALL {
            let p = sample_params(kind, &mut rng);
            assert_eq!(p.kind(), kind);
            assert_eq!(BrdfParams::from_array(kind, &p.to_array()).unwrap(), p);
        }
    }

    #[test]
    fn plan_links_components() {
        let m = tiny();
        let plan = plan_records(&m);
        assert_eq!(plan.len(), 12);
        for p in &plan[6..] {
            let BrdfParams::Layered { stack, top_ref, bottom_ref } = p else { panic!() };
            let top = &plan[top_ref.unwrap() as usize];
            assert_eq!(top, &BrdfParams::Dielectric(stack.top));
            match (&stack.bottom, &plan[bottom_ref.unwrap() as usize]) {
                (Bottom::Conductor(c), BrdfParams::Conductor(d)) => assert_eq!(c, d),
                (Bottom::Layered(inner), BrdfParams::Layered { stack: s, .. }) => assert_eq!(inner.as_ref(), s),
                _ => panic!("bottom mismatch"),
            }
        }
    }

    #[test]
    fn splits_are_deterministic_and_sized() {
        let m = DatasetManifest::desk();
        let val = (0..m.total_records()).filter(|&i| m.split_of(i) == Split::Validation).count();
        assert_eq!(val, 5 + 5 + 40 + 6);
    }

    #[test]
    fn generation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nbds");
        generate_dataset(&tiny(), &path, |_, _| {}).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.records.len(), 12);
        assert!(ds.records.iter().all(|r| r.values.len() == 36 && r.values.iter().all(|v| v.is_finite() && *v >= 0.0)));
        let path2 = dir.path().join("b.nbds");
        ds.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

/// Continuous lookup into a tabulated isotropic BRDF: linear in both
/// elevations (clamped at the outermost strata) and periodic-linear in the
/// azimuth difference.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedBrdf {
    pub grid: GridSpec,
    pub values: Vec<f32>,
}

impl TabulatedBrdf {
    pub fn new(grid: GridSpec, values: Vec<f32>) -> Result<Self, Error> {
        if values.len() != grid.pairs() {
            return Err(Error::Format(format!("{} values for {} grid pairs", values.len(), grid.pairs())));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    fn at(&self, ti: usize, to: usize, dk: usize) -> f64 {
        let n = self.grid.n_phi;
        self.values[(ti * n) * self.grid.directions_per_hemisphere() + to * n + dk] as f64
    }

    pub fn eval(&self, wi: Direction, wo: Direction) -> f64 {
        if wi.z <= 0.0 || wo.z <= 0.0 {
            return 0.0;
        }
        let (nt, np) = (self.grid.n_theta, self.grid.n_phi);
        let coord = |w: Direction| {
            let u = (w.theta() / std::f64::consts::FRAC_PI_2 * nt as f64 - 0.5).clamp(0.0, (nt - 1) as f64);
            let i = (u.floor() as usize).min(nt.saturating_sub(2));
            (i, u - i as f64)
        };
        let (i0, fi) = coord(wi);
        let (o0, fo) = coord(wo);
        let (i1, o1) = ((i0 + 1).min(nt - 1), (o0 + 1).min(nt - 1));
        let dphi = (wo.phi() - wi.phi()).rem_euclid(std::f64::consts::TAU);
        let v = dphi / std::f64::consts::TAU * np as f64;
        let k0 = (v.floor() as usize) % np;
        let fk = v - v.floor();
        let k1 = (k0 + 1) % np;
        let mut acc = 0.0;
        for (ti, wt) in [(i0, 1.0 - fi), (i1, fi)] {
            for (to, wo_) in [(o0, 1.0 - fo), (o1, fo)] {
                let w = wt * wo_;
                if w == 0.0 {
                    continue;
                }
                acc += w * ((1.0 - fk) * self.at(ti, to, k0) + fk * self.at(ti, to, k1));
            }
        }
        acc
    }
}

#[cfg(test)]
mod table_tests {
    use super::*;

    #[test]
    fn reproduces_grid_nodes() {
        let grid = GridSpec::new(5, 8);
        let p = BrdfParams::Conductor(ConductorParams { alpha: 0.4, r0: 0.8 });
        let t = TabulatedBrdf::new(grid, tabulate_analytic(&p, grid)).unwrap();
        let dirs = grid.directions();
        for (i, &wi) in dirs.iter().enumerate() {
            for (o, &wo) in dirs.iter().enumerate() {
                let v = t.values[i * dirs.len() + o] as f64;
                assert!((t.eval(wi, wo) - v).abs() <= 1e-5 * v.max(1.0), "{i} {o}");
            }
        }
    }
}
