//! Lobe images: `f(ωi, ·)·cosθo` over the outgoing hemisphere, seen from
//! above as an orthographic projection onto the unit disk.

use nbrdf_core::{Direction, Vec3};
use nbrdf_neural::decoder::Query;
use nbrdf_neural::texture::LatentTexture;
use nbrdf_neural::{Decoder, LatentBrdf, LATENT_DIM};

use crate::image::ImageBuffer;
use crate::material::{Material, Rgb};
use crate::Error;

pub const MIN_LOBE_RESOLUTION: usize = 32;

/// Outgoing direction at pixel `(x, y)`, `None` outside the disk.
pub fn lobe_direction(x: usize, y: usize, resolution: usize) -> Option<Direction> {
    let u = 2.0 * (x as f64 + 0.5) / resolution as f64 - 1.0;
    let v = 1.0 - 2.0 * (y as f64 + 0.5) / resolution as f64;
    let r2 = u * u + v * v;
    (r2 < 1.0).then(|| Vec3::new(u, v, (1.0 - r2).sqrt()))
}

/// Lobe image from a batched evaluator of `f(ωi, ωo)` over many `ωo`.
pub fn render_lobe_with(eval: impl FnOnce(Direction, &[Direction]) -> Vec<Rgb>, wi: Direction, resolution: usize) -> Result<ImageBuffer, Error> {
    if resolution < MIN_LOBE_RESOLUTION {
        return Err(Error::InvalidArgument(format!("lobe resolution {resolution} is below {MIN_LOBE_RESOLUTION}")));
    }
    if !(wi.z > 0.0) {
        return Err(Error::InvalidArgument("incoming direction below the surface".into()));
    }
    let mut pix = Vec::new();
    let mut dirs = Vec::new();
    for y in 0..resolution {
        for x in 0..resolution {
            if let Some(d) = lobe_direction(x, y, resolution) {
                pix.push((x, y));
                dirs.push(d);
            }
        }
    }
    let vals = eval(wi, &dirs);
    let mut img = ImageBuffer::new(resolution, resolution);
    for (((x, y), d), f) in pix.into_iter().zip(&dirs).zip(vals) {
        img.set(x, y, f.map(|v| (v * d.z) as f32));
    }
    Ok(img)
}

fn decode(decoder: &Decoder, latent: &LatentBrdf, wi: Direction, dirs: &[Direction]) -> Vec<Rgb> {
    let mut out = vec![[0.0; 3]; dirs.len()];
    let n = latent.n_channels();
    for (c, v) in latent.channels().iter().enumerate() {
        let q: Vec<Query> = dirs.iter().map(|&wo| Query { latent: v, wi, wo }).collect();
        for (o, f) in out.iter_mut().zip(decoder.eval_queries(&q)) {
            let f = f.max(0.0) as f64;
            if n == 1 {
                *o = [f; 3];
            } else {
                o[c] = f;
            }
        }
    }
    out
}

fn texture_mean(tex: &LatentTexture) -> LatentBrdf {
    let m = tex.level_mean(0);
    LatentBrdf::new(m.chunks_exact(LATENT_DIM).map(|c| std::array::from_fn(|i| c[i] as f32)).collect()).expect("validated channel count")
}

/// Lobe image of a material. `decoders` is indexed like `Scene::decoders`;
/// a latent texture shows its mean latent.
pub fn render_lobe(material: &Material, decoders: &[&Decoder], wi: Direction, resolution: usize) -> Result<ImageBuffer, Error> {
    let decoder = |d: usize| decoders.get(d).copied().ok_or_else(|| Error::UnresolvedMaterial(format!("decoder {d}")));
    match material {
        Material::Latent { decoder: d, latent, .. } => {
            let dec = decoder(*d)?;
            render_lobe_with(|wi, dirs| decode(dec, latent, wi, dirs), wi, resolution)
        }
        Material::Texture { decoder: d, texture, .. } => {
            let dec = decoder(*d)?;
            let latent = texture_mean(texture);
            render_lobe_with(|wi, dirs| decode(dec, &latent, wi, dirs), wi, resolution)
        }
        m => render_lobe_with(|wi, dirs| dirs.iter().map(|&wo| m.eval_analytic(wi, wo).expect("analytic material")).collect(), wi, resolution),
    }
}
