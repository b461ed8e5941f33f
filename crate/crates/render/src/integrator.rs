//! Wavefront path tracer.
//!
//! Each tile advances all of its paths one bounce at a time. Shading points
//! queue BRDF queries into a per-tile [`QueryBuffer`]; the buffer is flushed
//! whenever it reaches the batch size and at the end of every bounce.

use std::f64::consts::PI;

use nbrdf_core::math::orthonormal_basis;
use nbrdf_core::{Direction, RngStream, Vec3};
use nbrdf_neural::texture::sample_texture;
use rayon::prelude::*;

use crate::buffer::{QueryBuffer, QueryEntry, QueryTag};
use crate::geometry::Ray;
use crate::image::ImageBuffer;
use crate::material::{Material, Rgb};
use crate::scene::{Bindings, Light, Scene};
use crate::Error;

pub const MAX_DEPTH: usize = 8;
pub const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    LightOnly,
    BrdfOnly,
    Mis,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "light" => Ok(Strategy::LightOnly),
            "brdf" => Ok(Strategy::BrdfOnly),
            "mis" => Ok(Strategy::Mis),
            _ => Err(format!("unknown strategy `{s}` (light, brdf, mis)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Filter {
    Box,
    /// Gaussian with the given standard deviation in pixels, by filter
    /// importance sampling; truncated at three deviations.
    Gaussian(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub spp: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Queries per flush; `None` evaluates each query on its own.
    pub batch_size: Option<usize>,
    pub filter: Filter,
    /// Samples per pixel traced together in one wavefront pass.
    pub pass_spp: usize,
    /// Recomputes the density of every BRDF-sampled direction and counts
    /// mismatches with the density returned by the sampler.
    pub audit: bool,
    /// Render only `[x0, x0+w) × [y0, y0+h)` of the camera image.
    pub crop: Option<[usize; 4]>,
}

impl RenderOptions {
    pub fn new(spp: usize, strategy: Strategy, seed: u64) -> Self {
        Self { spp, strategy, seed, batch_size: Some(1 << 14), filter: Filter::Box, pass_spp: 64, audit: false, crop: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PixelAccum {
    n: f64,
    mean: Rgb,
    m2: Rgb,
    /// Luminance mean and central sums for orders 2 to 4.
    lum: [f64; 4],
}

impl PixelAccum {
    fn add(&mut self, x: Rgb) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        for c in 0..3 {
            let d = x[c] - self.mean[c];
            self.mean[c] += d / n;
            self.m2[c] += d * (x[c] - self.mean[c]);
        }
        let y = luminance(x);
        let [mean, m2, m3, m4] = &mut self.lum;
        let delta = y - *mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let t1 = delta * dn * n1;
        *mean += dn;
        *m4 += t1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * *m2 - 4.0 * dn * *m3;
        *m3 += t1 * dn * (n - 2.0) - 3.0 * dn * *m2;
        *m2 += t1;
    }
}

pub fn luminance(c: Rgb) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Per-channel variance of a single sample.
    pub sample_variance: ImageBuffer,
    /// Per-pixel variance of the luminance of a single sample.
    pub luminance_variance: Vec<f64>,
    /// Standard error of each `luminance_variance` entry.
    pub luminance_variance_se: Vec<f64>,
    pub spp: usize,
    pub pdf_mismatches: u64,
    pub queries: u64,
}

impl RenderOutput {
    /// Mean over pixels of the per-pixel sample variance and its standard error.
    pub fn mean_variance(&self) -> (f64, f64) {
        let n = self.luminance_variance.len().max(1) as f64;
        let m = self.luminance_variance.iter().sum::<f64>() / n;
        let se = self.luminance_variance_se.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
        (m, se)
    }
}

struct PathState {
    pixel: usize,
    ray: Ray,
    throughput: Rgb,
    radiance: Rgb,
    /// Solid-angle density of the last BRDF-sampled direction.
    prev_pdf: f64,
    /// Distance travelled from the camera, for texture footprints.
    distance: f64,
    rng: RngStream,
    alive: bool,
    next_origin: Vec3,
}

/// Shading frame with `n` as local `+z`.
#[derive(Debug, Clone, Copy)]
struct Frame {
    t: Vec3,
    b: Vec3,
    n: Vec3,
}

impl Frame {
    fn from_normal_tangent(n: Vec3, tangent: Vec3) -> Self {
        let t = tangent - n * n.dot(tangent);
        if t.length_squared() < 1e-12 {
            let (t, b) = orthonormal_basis(n);
            return Self { t, b, n };
        }
        let t = t.normalize();
        Self { t, b: n.cross(t), n }
    }

    fn to_local(&self, v: Vec3) -> Direction {
        Vec3::new(v.dot(self.t), v.dot(self.b), v.dot(self.n))
    }

    fn to_world(&self, v: Direction) -> Vec3 {
        self.t * v.x + self.b * v.y + self.n * v.z
    }
}

fn power_heuristic(a: f64, b: f64) -> f64 {
    let (a2, b2) = (a * a, b * b);
    if a2 + b2 == 0.0 {
        0.0
    } else {
        a2 / (a2 + b2)
    }
}

fn offset(p: Vec3, n: Vec3, dir: Vec3) -> Vec3 {
    let eps = 1e-5 * (1.0 + p.x.abs().max(p.y.abs()).max(p.z.abs()));
    if dir.dot(n) >= 0.0 {
        p + n * eps
    } else {
        p - n * eps
    }
}

struct LightSample {
    dir: Vec3,
    distance: f64,
    /// Emitted radiance (or intensity over squared distance for point lights).
    value: Rgb,
    /// Solid-angle density including light selection; `None` for delta lights.
    pdf: Option<f64>,
}

fn sample_light(scene: &Scene, p: Vec3, rng: &mut RngStream) -> Option<LightSample> {
    let n = scene.lights.len();
    if n == 0 {
        return None;
    }
    let k = rng.below(n as u64) as usize;
    let sel = 1.0 / n as f64;
    let (u1, u2) = rng.next_2d();
    match &scene.lights[k] {
        Light::Point { position, intensity } => {
            let d = *position - p;
            let r2 = d.length_squared();
            let r = r2.sqrt();
            Some(LightSample { dir: d / r, distance: r, value: intensity.map(|i| i / r2 / sel), pdf: None })
        }
        Light::Area { origin, e1, e2, radiance } => {
            let y = *origin + *e1 * u1 + *e2 * u2;
            let nl = e1.cross(*e2);
            let area = nl.length();
            let d = y - p;
            let r2 = d.length_squared();
            let r = r2.sqrt();
            let dir = d / r;
            let cos_l = -dir.dot(nl / area);
            if cos_l <= 0.0 {
                return None;
            }
            Some(LightSample { dir, distance: r, value: *radiance, pdf: Some(sel * r2 / (area * cos_l)) })
        }
        Light::Env { map, .. } => {
            let (dir, pdf) = match map {
                Some(m) => m.sample(u1, u2),
                None => (nbrdf_core::math::sample_uniform_sphere(u1, u2), 1.0 / (4.0 * PI)),
            };
            if !(pdf > 0.0) {
                return None;
            }
            Some(LightSample { dir, distance: f64::INFINITY, value: scene.lights[k].env_radiance(dir), pdf: Some(sel * pdf) })
        }
    }
}

/// Solid-angle density with which light sampling from `p` produces the
/// emitter point `y` on area light `k`.
fn area_light_pdf(scene: &Scene, k: usize, p: Vec3, y: Vec3) -> f64 {
    let Light::Area { e1, e2, .. } = &scene.lights[k] else { return 0.0 };
    let nl = e1.cross(*e2);
    let area = nl.length();
    let d = y - p;
    let r2 = d.length_squared();
    let cos_l = (-d.normalize().dot(nl / area)).abs();
    if cos_l <= 0.0 {
        return 0.0;
    }
    r2 / (area * cos_l) / scene.lights.len() as f64
}

struct TileContext<'a> {
    scene: &'a Scene,
    bindings: &'a Bindings,
    opts: &'a RenderOptions,
    pixel_angle: f64,
}

struct TileResult {
    pixels: Vec<(usize, PixelAccum)>,
    mismatches: u64,
    queries: u64,
}

fn add(a: &mut Rgb, b: Rgb) {
    for c in 0..3 {
        a[c] += b[c];
    }
}

fn mul(a: Rgb, b: Rgb) -> Rgb {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

fn scale(a: Rgb, s: f64) -> Rgb {
    a.map(|v| v * s)
}

impl TileContext<'_> {
    fn camera_sample(&self, px: usize, py: usize, rng: &mut RngStream) -> Ray {
        let cam = self.scene.camera.as_ref().expect("resolved scene has a camera");
        let (dx, dy) = match self.opts.filter {
            Filter::Box => rng.next_2d(),
            Filter::Gaussian(sigma) => loop {
                let (u1, u2) = rng.next_2d();
                let r = sigma * (-2.0 * (1.0 - u1).ln()).sqrt();
                let (ox, oy) = (r * (2.0 * PI * u2).cos(), r * (2.0 * PI * u2).sin());
                if ox.abs() <= 3.0 * sigma && oy.abs() <= 3.0 * sigma {
                    break (0.5 + ox, 0.5 + oy);
                }
            },
        };
        cam.ray(px as f64 + dx, py as f64 + dy)
    }

    fn render_tile(&self, pixels: &[(usize, usize, usize)]) -> TileResult {
        let opts = self.opts;
        let mut accum = vec![PixelAccum::default(); pixels.len()];
        let mut mismatches = 0;
        let mut queries = 0;
        let mut done = 0;
        while done < opts.spp {
            let pass = opts.pass_spp.max(1).min(opts.spp - done);
            let mut paths = Vec::with_capacity(pixels.len() * pass);
            for (slot, &(px, py, id)) in pixels.iter().enumerate() {
                let pixel_rng = RngStream::new(opts.seed, id as u64);
                for s in done..done + pass {
                    let mut rng = pixel_rng.derive(s as u64);
                    let ray = self.camera_sample(px, py, &mut rng);
                    paths.push(PathState {
                        pixel: slot,
                        ray,
                        throughput: [1.0; 3],
                        radiance: [0.0; 3],
                        prev_pdf: 0.0,
                        distance: 0.0,
                        rng,
                        alive: true,
                        next_origin: Vec3::ZERO,
                    });
                }
            }
            let (m, q) = self.trace(&mut paths);
            mismatches += m;
            queries += q;
            for p in &paths {
                accum[p.pixel].add(p.radiance);
            }
            done += pass;
        }
        TileResult { pixels: pixels.iter().map(|p| p.2).zip(accum).collect(), mismatches, queries }
    }

    fn emitter_weight(&self, depth: usize, prev_pdf: f64, light_pdf: f64) -> f64 {
        if depth == 0 {
            return 1.0;
        }
        match self.opts.strategy {
            Strategy::LightOnly => 0.0,
            Strategy::BrdfOnly => 1.0,
            Strategy::Mis => power_heuristic(prev_pdf, light_pdf),
        }
    }

    fn trace(&self, paths: &mut [PathState]) -> (u64, u64) {
        let scene = self.scene;
        let strategy = self.opts.strategy;
        let mut buf = QueryBuffer::default();
        let mut mismatches = 0u64;
        let mut queries = 0u64;
        let env = scene.env_light();
        for depth in 0..=MAX_DEPTH {
            let mut any = false;
            for pi in 0..paths.len() {
                let p = &mut paths[pi];
                if !p.alive {
                    continue;
                }
                p.alive = false;
                let Some(hit) = scene.intersect(&p.ray, f64::INFINITY) else {
                    if let Some(k) = env {
                        let light_pdf = scene.lights[k].env_pdf(p.ray.dir) / scene.lights.len() as f64;
                        let w = self.emitter_weight(depth, p.prev_pdf, light_pdf);
                        if w > 0.0 {
                            add(&mut p.radiance, scale(mul(p.throughput, scene.lights[k].env_radiance(p.ray.dir)), w));
                        }
                    }
                    continue;
                };
                let s = hit.surface;
                let obj = &scene.objects[hit.object];
                if depth == 0 {
                    p.distance = s.t;
                }
                if let Some(k) = obj.light {
                    if let Light::Area { radiance, .. } = &scene.lights[k] {
                        if p.ray.dir.dot(s.normal) < 0.0 {
                            let w = self.emitter_weight(depth, p.prev_pdf, area_light_pdf(scene, k, p.ray.origin, s.point));
                            add(&mut p.radiance, scale(mul(p.throughput, *radiance), w));
                        }
                    }
                    continue;
                }
                if depth == MAX_DEPTH {
                    continue;
                }
                let Some(mi) = self.bindings.material[hit.object] else { continue };
                let material = &scene.materials[mi].1;
                let wo = -p.ray.dir;
                let flip = if s.normal.dot(wo) < 0.0 { -1.0 } else { 1.0 };
                let ng = s.normal * flip;
                let mut ns = s.shading_normal * flip;
                if ns.dot(wo) <= 0.0 {
                    ns = ng;
                }
                let mut frame = Frame::from_normal_tangent(ns, s.tangent);
                if let Some(nm) = self.bindings.normal_map[hit.object] {
                    let local = scene.normal_maps[nm].1.lookup(s.uv);
                    let n2 = frame.to_world(local).normalize();
                    if n2.dot(wo) > 0.0 {
                        frame = Frame::from_normal_tangent(n2, frame.t);
                    }
                }
                let view = frame.to_local(wo);
                if view.z <= 0.0 {
                    continue;
                }
                let latent = match material {
                    Material::Texture { texture, .. } => {
                        let cos = view.z.max(1e-2);
                        let world = self.pixel_angle * p.distance / cos.sqrt();
                        let texels = world * s.uv_per_length * texture.width().max(texture.height()) as f64;
                        Some(buf.push_latent(sample_texture(texture, s.uv, texels)))
                    }
                    _ => None,
                };
                p.next_origin = s.point;
                let base = QueryEntry {
                    path: pi as u32,
                    material: mi as u32,
                    latent,
                    light: view,
                    view,
                    tag: QueryTag::Light,
                    pdf: 0.0,
                    weight: [0.0; 3],
                };
                let mut pending: [Option<QueryEntry>; 2] = [None, None];
                if strategy != Strategy::BrdfOnly {
                    if let Some(ls) = sample_light(scene, s.point, &mut p.rng) {
                        let l = frame.to_local(ls.dir);
                        if l.z > 0.0 && ls.dir.dot(ng) > 0.0 {
                            let o = offset(s.point, ng, ls.dir);
                            let t_max = if ls.distance.is_finite() { (s.point + ls.dir * ls.distance - o).length() * (1.0 - 1e-5) } else { f64::INFINITY };
                            if !scene.occluded(&Ray { origin: o, dir: ls.dir }, t_max) {
                                let w = match (strategy, ls.pdf) {
                                    (_, None) => 1.0,
                                    (Strategy::Mis, Some(pl)) => power_heuristic(pl, material.pdf(view, l)),
                                    (_, Some(_)) => 1.0,
                                };
                                let inv_pdf = ls.pdf.map_or(1.0, |pl| 1.0 / pl);
                                let weight = scale(mul(p.throughput, ls.value), l.z * inv_pdf * w);
                                pending[0] = Some(QueryEntry { light: l, tag: QueryTag::Light, pdf: ls.pdf.unwrap_or(0.0), weight, ..base });
                            }
                        }
                    }
                }
                if let Some((l, pdf)) = material.sample(view, &mut p.rng) {
                    if self.opts.audit && material.pdf(view, l).to_bits() != pdf.to_bits() {
                        mismatches += 1;
                    }
                    let dir = frame.to_world(l);
                    if dir.dot(ng) > 0.0 && pdf > 0.0 {
                        p.alive = true;
                        p.ray = Ray { origin: offset(s.point, ng, dir), dir };
                        p.prev_pdf = pdf;
                        pending[1] = Some(QueryEntry { light: l, tag: QueryTag::Bsdf, pdf, weight: [l.z / pdf; 3], ..base });
                    }
                }
                for e in pending.into_iter().flatten() {
                    queries += 1;
                    any = true;
                    match self.opts.batch_size {
                        None => {
                            let f = buf.eval_single(scene, &e);
                            apply(paths, e, f);
                        }
                        Some(b) => {
                            buf.entries.push(e);
                            if buf.len() >= b {
                                for (e, f) in buf.flush(scene) {
                                    apply(paths, e, f);
                                }
                            }
                        }
                    }
                }
                if self.opts.batch_size.is_none() {
                    buf.latents.clear();
                }
            }
            for (e, f) in buf.flush(scene) {
                apply(paths, e, f);
            }
            if !any {
                break;
            }
        }
        (mismatches, queries)
    }
}

fn apply(paths: &mut [PathState], e: QueryEntry, f: Rgb) {
    let p = &mut paths[e.path as usize];
    match e.tag {
        QueryTag::Light => add(&mut p.radiance, mul(e.weight, f)),
        QueryTag::Bsdf => {
            p.throughput = mul(p.throughput, mul(e.weight, f));
            if p.throughput.iter().all(|&t| t == 0.0) {
                p.alive = false;
            }
        }
    }
}

/// Renders the scene's camera image.
pub fn render(scene: &Scene, opts: &RenderOptions) -> Result<RenderOutput, Error> {
    if opts.spp == 0 {
        return Err(Error::InvalidArgument("spp must be at least 1".into()));
    }
    let bindings = scene.resolve()?;
    let cam = scene.camera.expect("resolve checks the camera");
    let [x0, y0, w, h] = opts.crop.unwrap_or([0, 0, cam.width, cam.height]);
    if x0 + w > cam.width || y0 + h > cam.height || w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("crop {:?} outside {}×{}", opts.crop, cam.width, cam.height)));
    }
    let ctx = TileContext { scene, bindings: &bindings, opts, pixel_angle: cam.pixel_angle() };
    let mut tiles = Vec::new();
    for ty in (0..h).step_by(TILE) {
        for tx in (0..w).step_by(TILE) {
            let mut px = Vec::new();
            for y in ty..(ty + TILE).min(h) {
                for x in tx..(tx + TILE).min(w) {
                    let (gx, gy) = (x0 + x, y0 + y);
                    px.push((gx, gy, gy * cam.width + gx));
                }
            }
            tiles.push(px);
        }
    }
    let results: Vec<TileResult> = tiles.par_iter().map(|t| ctx.render_tile(t)).collect();
    let mut image = ImageBuffer::new(w, h);
    let mut var = ImageBuffer::new(w, h);
    let mut lum_var = vec![0.0; w * h];
    let mut lum_se = vec![0.0; w * h];
    let (mut mismatches, mut queries) = (0, 0);
    for r in results {
        mismatches += r.mismatches;
        queries += r.queries;
        for (id, a) in r.pixels {
            let (gx, gy) = (id % cam.width, id / cam.width);
            let (x, y) = (gx - x0, gy - y0);
            image.set(x, y, a.mean.map(|v| v as f32));
            let n = a.n;
            let denom = (n - 1.0).max(1.0);
            var.set(x, y, a.m2.map(|m| (m / denom) as f32));
            let s2 = a.lum[1] / denom;
            let mu4 = a.lum[3] / n;
            let v_s2 = if n > 3.0 { ((mu4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n).max(0.0) } else { s2 * s2 };
            lum_var[y * w + x] = s2;
            lum_se[y * w + x] = v_s2.sqrt();
        }
    }
    if !image.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(RenderOutput {
        image,
        sample_variance: var,
        luminance_variance: lum_var,
        luminance_variance_se: lum_se,
        spp: opts.spp,
        pdf_mismatches: mismatches,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_moments() {
        let xs = [1.0, 4.0, 2.0, 8.0, 3.0];
        let mut a = PixelAccum::default();
        for x in xs {
            a.add([x, 0.0, 0.0]);
        }
        let mean = xs.iter().sum::<f64>() / 5.0;
        let m2: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let m4: f64 = xs.iter().map(|x| (x - mean).powi(4)).sum();
        assert!((a.mean[0] - mean).abs() < 1e-12 && (a.m2[0] - m2).abs() < 1e-9);
        let k = 0.2126;
        assert!((a.lum[1] - m2 * k * k).abs() < 1e-9);
        assert!((a.lum[3] - m4 * k.powi(4)).abs() < 1e-9);
    }

    #[test]
    fn power_heuristic_limits() {
        assert_eq!(power_heuristic(1.0, 0.0), 1.0);
        assert_eq!(power_heuristic(0.0, 0.0), 0.0);
        assert!((power_heuristic(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((power_heuristic(2.0, 1.0) + power_heuristic(1.0, 2.0) - 1.0).abs() < 1e-15);
    }
}
