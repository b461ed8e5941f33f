//! Latent-space interpolation, latent textures and their mip chains.
//!
//! `NBLT` layout (little-endian): magic, u32 version, u32 width, u32
//! height, u32 channels, u32 latent dim, u32 level count, then every level
//! from the finest, texels row-major, each `channels × dim` f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::latent::{LatentBrdf, LatentVector, LATENT_DIM};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"NBLT";
pub const VERSION: u32 = 1;
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// `Σ wᵢ Vᵢ` channel by channel.
pub fn interpolate(latents: &[LatentBrdf], weights: &[f64]) -> Result<LatentBrdf, Error> {
    if latents.is_empty() || latents.len() != weights.len() {
        return Err(Error::EmptyInput(format!("{} latents with {} weights", latents.len(), weights.len())));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightSum);
    }
    let n = latents[0].n_channels();
    if latents.iter().any(|l| l.n_channels() != n) {
        return Err(Error::ChannelMismatch("latents disagree on channel count".into()));
    }
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let mut v = [0f64; LATENT_DIM];
        for (l, &w) in latents.iter().zip(weights) {
            for (a, b) in v.iter_mut().zip(l.channel(c)) {
                *a += w * *b as f64;
            }
        }
        out.push(v.map(|x| x as f32));
    }
    LatentBrdf::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MipLevel {
    pub width: usize,
    pub height: usize,
    /// `width × height × channels × LATENT_DIM`, row-major texels.
    pub data: Vec<f32>,
}

impl MipLevel {
    fn texel(&self, channels: usize, x: usize, y: usize) -> &[f32] {
        let n = channels * LATENT_DIM;
        let i = (y * self.width + x) * n;
        &self.data[i..i + n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTexture {
    pub channels: usize,
    /// Level 0 first; empty chain beyond level 0 until `build_mipmap`.
    pub levels: Vec<MipLevel>,
}

impl LatentTexture {
    pub fn new(width: usize, height: usize, texels: &[LatentBrdf]) -> Result<Self, Error> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(Error::EmptyInput(format!("{width}×{height} texture with {} texels", texels.len())));
        }
        let channels = texels[0].n_channels();
        if texels.iter().any(|t| t.n_channels() != channels) {
            return Err(Error::ChannelMismatch("texels disagree on channel count".into()));
        }
        let data = texels.iter().flat_map(|t| t.channels().iter().flatten().copied()).collect();
        Ok(Self { channels, levels: vec![MipLevel { width, height, data }] })
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    /// Index of the coarsest level.
    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn texel(&self, level: usize, x: usize, y: usize) -> LatentBrdf {
        let t = self.levels[level].texel(self.channels, x, y);
        LatentBrdf::new(t.chunks_exact(LATENT_DIM).map(|c| c.try_into().unwrap()).collect()).expect("channel count validated")
    }

    /// Mean over level `k` with every texel weighted by the level-0 area it
    /// covers; equals the level-0 mean.
    pub fn level_mean(&self, level: usize) -> Vec<f64> {
        let n = self.channels * LATENT_DIM;
        let (w0, h0) = (self.width(), self.height());
        let lv = &self.levels[level];
        let span = 1usize << level;
        let mut acc = vec![0f64; n];
        for y in 0..lv.height {
            let hy = (h0.min((y + 1) * span) - y * span) as f64;
            for x in 0..lv.width {
                let wx = (w0.min((x + 1) * span) - x * span) as f64;
                for (a, v) in acc.iter_mut().zip(lv.texel(self.channels, x, y)) {
                    *a += wx * hy * *v as f64;
                }
            }
        }
        acc.iter().map(|a| a / (w0 * h0) as f64).collect()
    }
}

/// Appends levels down to 1×1. Each parent is the area-weighted mean of the
/// level-0 texels under it, computed from its (up to four) children; at odd
/// edges the narrower children count proportionally less.
pub fn build_mipmap(tex: &LatentTexture) -> LatentTexture {
    let mut out = LatentTexture { channels: tex.channels, levels: vec![tex.levels[0].clone()] };
    let n = tex.channels * LATENT_DIM;
    let (w0, h0) = (tex.width(), tex.height());
    let mut span = 1usize;
    while {
        let l = out.levels.last().unwrap();
        l.width > 1 || l.height > 1
    } {
        let prev = out.levels.last().unwrap();
        let (w, h) = (prev.width.div_ceil(2), prev.height.div_ceil(2));
        // level-0 extent covered by child column/row i of the previous level
        let cover = |i: usize, total: usize| (total.min((i + 1) * span) - i * span) as f64;
        let mut data = Vec::with_capacity(w * h * n);
        let mut acc = vec![0f64; n];
        for y in 0..h {
            for x in 0..w {
                acc.fill(0.0);
                let mut area = 0.0;
                for cy in 2 * y..(2 * y + 2).min(prev.height) {
                    for cx in 2 * x..(2 * x + 2).min(prev.width) {
                        let a = cover(cx, w0) * cover(cy, h0);
                        area += a;
                        for (s, v) in acc.iter_mut().zip(prev.texel(tex.channels, cx, cy)) {
                            *s += a * *v as f64;
                        }
                    }
                }
                data.extend(acc.iter().map(|s| (s / area) as f32));
            }
        }
        span *= 2;
        out.levels.push(MipLevel { width: w, height: h, data });
    }
    out
}

fn bilinear(tex: &LatentTexture, level: usize, u: f64, v: f64) -> Vec<f64> {
    let lv = &tex.levels[level];
    let fx = (u * lv.width as f64 - 0.5).clamp(0.0, (lv.width - 1) as f64);
    let fy = (v * lv.height as f64 - 0.5).clamp(0.0, (lv.height - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(lv.width - 1), (y0 + 1).min(lv.height - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let n = tex.channels * LATENT_DIM;
    let mut out = vec![0f64; n];
    for (x, y, w) in [(x0, y0, (1.0 - tx) * (1.0 - ty)), (x1, y0, tx * (1.0 - ty)), (x0, y1, (1.0 - tx) * ty), (x1, y1, tx * ty)] {
        if w == 0.0 {
            continue;
        }
        for (o, t) in out.iter_mut().zip(lv.texel(tex.channels, x, y)) {
            *o += w * *t as f64;
        }
    }
    out
}

/// Trilinear lookup: level `clamp(log2(footprint), 0, L)`, bilinear within
/// the two nearest levels, clamp addressing.
pub fn sample_texture(tex: &LatentTexture, uv: [f64; 2], footprint: f64) -> LatentBrdf {
    let l_max = tex.max_level() as f64;
    let lambda = footprint.max(f64::MIN_POSITIVE).log2().clamp(0.0, l_max);
    let (u, v) = (uv[0].clamp(0.0, 1.0), uv[1].clamp(0.0, 1.0));
    let lo = lambda.floor() as usize;
    let t = lambda - lo as f64;
    let mut acc = bilinear(tex, lo, u, v);
    if t > 0.0 {
        let hi = bilinear(tex, lo + 1, u, v);
        for (a, b) in acc.iter_mut().zip(hi) {
            *a = (1.0 - t) * *a + t * b;
        }
    }
    let channels: Vec<LatentVector> = acc.chunks_exact(LATENT_DIM).map(|c| std::array::from_fn(|i| c[i] as f32)).collect();
    LatentBrdf::new(channels).expect("channel count validated")
}

impl LatentTexture {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), Error> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.width() as u32, self.height() as u32, self.channels as u32, LATENT_DIM as u32, self.levels.len() as u32] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for l in &self.levels {
            for v in &l.data {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, Error> {
        let eof = crate::eof;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a latent texture".into()));
        }
        let mut h = [0u32; 6];
        r.read_u32_into::<LittleEndian>(&mut h).map_err(eof)?;
        let [version, width, height, channels, dim, count] = h.map(|x| x as usize);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported texture version {version}")));
        }
        if dim != LATENT_DIM || !(channels == 1 || channels == 3) || width == 0 || height == 0 || count == 0 {
            return Err(Error::Format("invalid texture header".into()));
        }
        let mut levels = Vec::with_capacity(count);
        let (mut w, mut hh) = (width, height);
        for _ in 0..count {
            let mut data = vec![0f32; w * hh * channels * dim];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
            levels.push(MipLevel { width: w, height: hh, data });
            w = w.div_ceil(2);
            hh = hh.div_ceil(2);
        }
        Ok(Self { channels, levels })
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

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(x: f32) -> LatentBrdf {
        LatentBrdf::mono(std::array::from_fn(|i| x + i as f32 * 0.25))
    }

    #[test]
    fn interpolation_identities() {
        let (a, b) = (lat(1.0), lat(-3.0));
        assert_eq!(interpolate(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(interpolate(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap(), a);
        assert!(matches!(interpolate(&[a.clone(), b], &[0.5, 0.6]), Err(Error::WeightSum)));
        assert!(matches!(interpolate(&[a, LatentBrdf::ones(3).unwrap()], &[0.5, 0.5]), Err(Error::ChannelMismatch(_))));
    }

    #[test]
    fn two_by_two_mean() {
        let t = LatentTexture::new(2, 2, &[lat(0.0), lat(1.0), lat(2.0), lat(5.0)]).unwrap();
        let m = build_mipmap(&t);
        assert_eq!(m.levels.len(), 2);
        assert_eq!(m.texel(1, 0, 0), lat(2.0));
    }

    #[test]
    fn odd_sizes_halve_up() {
        let texels: Vec<_> = (0..15).map(|i| lat(i as f32)).collect();
        let m = build_mipmap(&LatentTexture::new(5, 3, &texels).unwrap());
        let dims: Vec<_> = m.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(5, 3), (3, 2), (2, 1), (1, 1)]);
        let base = m.level_mean(0);
        for k in 1..m.levels.len() {
            for (a, b) in m.level_mean(k).iter().zip(&base) {
                assert!((a - b).abs() < 1e-5, "level {k}");
            }
        }
    }
}
