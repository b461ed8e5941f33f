//! Scene description and its line-oriented text format.
//!
//! One statement per line, `kind key=value ...`; `#` starts a comment.
//! Vectors are comma separated (`0,1,2`) and paths are relative to the
//! scene file. See `docs/scene-format.md` for the grammar.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nbrdf_core::dataset::{Dataset, TabulatedBrdf};
use nbrdf_core::Vec3;
use nbrdf_neural::sampler::{fit_params, ProxyParams, ProxyPdf, SamplerNet};
use nbrdf_neural::texture::LatentTexture;
use nbrdf_neural::{Decoder, LatentBrdf, LatentFile, LATENT_DIM};

use crate::geometry::{Mesh, Ray, Shape, SurfaceHit};
use crate::image::ImageBuffer;
use crate::material::{Material, NeuralSampling, Rgb};
use crate::Error;

#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = (self.look_at - self.position).normalize();
        let right = fwd.cross(self.up).normalize();
        let up = right.cross(fwd);
        (fwd, right, up)
    }

    /// Ray through film position `(x, y)` in pixels, `y` growing downward.
    pub fn ray(&self, x: f64, y: f64) -> Ray {
        let (fwd, right, up) = self.basis();
        let tan = (self.fov.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * x / self.width as f64 - 1.0) * tan * aspect;
        let sy = (1.0 - 2.0 * y / self.height as f64) * tan;
        Ray { origin: self.position, dir: (fwd + right * sx + up * sy).normalize() }
    }

    /// Angle subtended by one pixel at the image center.
    pub fn pixel_angle(&self) -> f64 {
        2.0 * (self.fov.to_radians() * 0.5).tan() / self.height as f64
    }
}

/// Equirectangular map, `u = φ/2π`, `v = θ/π` with `θ` measured from `+z`.
#[derive(Debug, Clone)]
pub struct EnvMap {
    pub image: ImageBuffer,
    marginal: Vec<f64>,
    conditional: Vec<Vec<f64>>,
    row_mass: Vec<f64>,
    total: f64,
}

fn luminance(c: Rgb) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

fn cdf(weights: &[f64]) -> (Vec<f64>, f64) {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(weights.len() + 1);
    out.push(0.0);
    for w in weights {
        acc += w;
        out.push(acc);
    }
    (out, acc)
}

fn sample_cdf(c: &[f64], u: f64) -> (usize, f64) {
    let total = *c.last().unwrap();
    let target = u * total;
    let i = c.partition_point(|&x| x <= target).clamp(1, c.len() - 1) - 1;
    let span = c[i + 1] - c[i];
    let t = if span > 0.0 { (target - c[i]) / span } else { 0.5 };
    (i, t.clamp(0.0, 1.0))
}

impl EnvMap {
    pub fn new(image: ImageBuffer) -> Result<Self, Error> {
        let (w, h) = (image.width, image.height);
        let mut conditional = Vec::with_capacity(h);
        let mut row_mass = Vec::with_capacity(h);
        for y in 0..h {
            let sin = ((y as f64 + 0.5) / h as f64 * PI).sin();
            let row: Vec<f64> = (0..w).map(|x| luminance(image.get(x, y).map(|v| v.max(0.0) as f64)) * sin).collect();
            let (c, total) = cdf(&row);
            conditional.push(c);
            row_mass.push(total);
        }
        let (marginal, total) = cdf(&row_mass);
        if !(total > 0.0) {
            return Err(Error::Format("environment map has no energy".into()));
        }
        Ok(Self { image, marginal, conditional, row_mass, total })
    }

    fn uv(dir: Vec3) -> (f64, f64) {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x).rem_euclid(2.0 * PI);
        (phi / (2.0 * PI), theta / PI)
    }

    pub fn lookup(&self, dir: Vec3) -> Rgb {
        let (u, v) = Self::uv(dir);
        let x = ((u * self.image.width as f64) as usize).min(self.image.width - 1);
        let y = ((v * self.image.height as f64) as usize).min(self.image.height - 1);
        self.image.get(x, y).map(|c| c as f64)
    }

    pub fn pdf(&self, dir: Vec3) -> f64 {
        let (u, v) = Self::uv(dir);
        let (w, h) = (self.image.width, self.image.height);
        let x = ((u * w as f64) as usize).min(w - 1);
        let y = ((v * h as f64) as usize).min(h - 1);
        let c = &self.conditional[y];
        let p_texel = (c[x + 1] - c[x]) / self.total;
        let sin = (v * PI).sin();
        if !(sin > 0.0) {
            return 0.0;
        }
        p_texel * (w * h) as f64 / (2.0 * PI * PI * sin)
    }

    pub fn sample(&self, u1: f64, u2: f64) -> (Vec3, f64) {
        let (y, ty) = sample_cdf(&self.marginal, u1);
        let (x, tx) = if self.row_mass[y] > 0.0 { sample_cdf(&self.conditional[y], u2) } else { (0, u2) };
        let u = (x as f64 + tx) / self.image.width as f64;
        let v = (y as f64 + ty) / self.image.height as f64;
        let (theta, phi) = (v * PI, u * 2.0 * PI);
        let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        (dir, self.pdf(dir))
    }
}

#[derive(Debug, Clone)]
pub enum Light {
    Point { position: Vec3, intensity: Rgb },
    /// One-sided emitter facing `e1 × e2`.
    Area { origin: Vec3, e1: Vec3, e2: Vec3, radiance: Rgb },
    Env { radiance: Rgb, map: Option<Arc<EnvMap>> },
}

impl Light {
    pub fn env_radiance(&self, dir: Vec3) -> Rgb {
        match self {
            Light::Env { radiance, map: Some(m) } => {
                let c = m.lookup(dir);
                [c[0] * radiance[0], c[1] * radiance[1], c[2] * radiance[2]]
            }
            Light::Env { radiance, map: None } => *radiance,
            _ => [0.0; 3],
        }
    }

    pub fn env_pdf(&self, dir: Vec3) -> f64 {
        match self {
            Light::Env { map: Some(m), .. } => m.pdf(dir),
            Light::Env { map: None, .. } => 1.0 / (4.0 * PI),
            _ => 0.0,
        }
    }
}

/// Tangent-space normal map, RGB in `[0, 1]` remapped to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub image: ImageBuffer,
}

impl NormalMap {
    /// Bilinear, wrapped lookup of the tangent-space normal.
    pub fn lookup(&self, uv: [f64; 2]) -> Vec3 {
        let (w, h) = (self.image.width, self.image.height);
        let x = uv[0].rem_euclid(1.0) * w as f64 - 0.5;
        let y = uv[1].rem_euclid(1.0) * h as f64 - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let wrap = |v: f64, n: usize| (v as i64).rem_euclid(n as i64) as usize;
        let mut n = Vec3::ZERO;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let c = self.image.get(wrap(x0 + dx, w), wrap(y0 + dy, h));
                n = n + Vec3::new(c[0] as f64 * 2.0 - 1.0, c[1] as f64 * 2.0 - 1.0, c[2] as f64 * 2.0 - 1.0) * (wx * wy);
            }
        }
        if n.z <= 1e-3 || n.length_squared() < 1e-12 {
            Vec3::Z
        } else {
            n.normalize()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Object {
    pub shape: Shape,
    /// Material name; `None` for emitter geometry, which absorbs.
    pub material: Option<String>,
    pub normal_map: Option<String>,
    /// Index into `Scene::lights` for area-light geometry.
    pub light: Option<usize>,
}

/// Intersection result with scene bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct SceneHit {
    pub surface: SurfaceHit,
    pub object: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub camera: Option<Camera>,
    pub materials: Vec<(String, Material)>,
    pub decoders: Vec<(String, Arc<Decoder>)>,
    pub normal_maps: Vec<(String, Arc<NormalMap>)>,
    pub objects: Vec<Object>,
    pub lights: Vec<Light>,
}

/// Name bindings resolved to indices.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub material: Vec<Option<usize>>,
    pub normal_map: Vec<Option<usize>>,
}

impl Scene {
    pub fn add_material(&mut self, name: &str, m: Material) {
        self.materials.retain(|(n, _)| n != name);
        self.materials.push((name.to_owned(), m));
    }

    pub fn add_decoder(&mut self, name: &str, d: Arc<Decoder>) -> usize {
        self.decoders.push((name.to_owned(), d));
        self.decoders.len() - 1
    }

    pub fn add_object(&mut self, shape: Shape, material: &str) {
        self.objects.push(Object { shape, material: Some(material.to_owned()), normal_map: None, light: None });
    }

    /// Adds a light; area lights also add their emitting rectangle.
    pub fn add_light(&mut self, light: Light) {
        if let Light::Area { origin, e1, e2, .. } = &light {
            self.objects.push(Object { shape: Shape::Rect { origin: *origin, e1: *e1, e2: *e2 }, material: None, normal_map: None, light: Some(self.lights.len()) });
        }
        self.lights.push(light);
    }

    pub fn env_light(&self) -> Option<usize> {
        self.lights.iter().position(|l| matches!(l, Light::Env { .. }))
    }

    /// Checks that every binding refers to something that exists.
    pub fn resolve(&self) -> Result<Bindings, Error> {
        let find = |name: &str| self.materials.iter().position(|(n, _)| n == name);
        let mut material = Vec::with_capacity(self.objects.len());
        let mut normal_map = Vec::with_capacity(self.objects.len());
        for o in &self.objects {
            material.push(match &o.material {
                Some(name) => Some(find(name).ok_or_else(|| Error::UnresolvedMaterial(name.clone()))?),
                None => None,
            });
            normal_map.push(match &o.normal_map {
                Some(name) => Some(
                    self.normal_maps.iter().position(|(n, _)| n == name).ok_or_else(|| Error::UnresolvedMaterial(format!("normal map {name}")))?,
                ),
                None => None,
            });
        }
        for (name, m) in &self.materials {
            if let Some(d) = m.decoder() {
                if d >= self.decoders.len() {
                    return Err(Error::UnresolvedMaterial(format!("{name}: decoder {d} not loaded")));
                }
            }
        }
        if self.camera.is_none() {
            return Err(Error::Scene { line: 0, message: "no camera".into() });
        }
        Ok(Bindings { material, normal_map })
    }

    pub fn intersect(&self, ray: &Ray, t_max: f64) -> Option<SceneHit> {
        let mut best: Option<SceneHit> = None;
        let mut t = t_max;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(h) = o.shape.intersect(ray, t) {
                t = h.t;
                best = Some(SceneHit { surface: h, object: i });
            }
        }
        best
    }

    pub fn occluded(&self, ray: &Ray, t_max: f64) -> bool {
        self.objects.iter().any(|o| o.shape.intersect(ray, t_max).is_some())
    }

    /// Parses a scene file, loading every referenced asset.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, Error> {
        let mut p = Parser { base: base.to_path_buf(), scene: Scene::default(), samplers: HashMap::new(), datasets: HashMap::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            p.statement(line).map_err(|e| match e {
                Error::Scene { message, .. } => Error::Scene { line: i + 1, message },
                Error::UnresolvedMaterial(m) => Error::UnresolvedMaterial(m),
                other => Error::Scene { line: i + 1, message: other.to_string() },
            })?;
        }
        Ok(p.scene)
    }
}

struct Parser {
    base: PathBuf,
    scene: Scene,
    samplers: HashMap<String, Arc<SamplerNet>>,
    datasets: HashMap<PathBuf, Arc<Dataset>>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Scene { line: 0, message: message.into() }
}

struct Args<'a> {
    map: HashMap<&'a str, &'a str>,
    used: std::cell::RefCell<Vec<&'a str>>,
}

impl<'a> Args<'a> {
    fn parse(parts: &[&'a str]) -> Result<Self, Error> {
        let mut map = HashMap::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{part}`")))?;
            if map.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { map, used: Default::default() })
    }

    fn opt(&self, k: &'a str) -> Option<&'a str> {
        self.used.borrow_mut().push(k);
        self.map.get(k).copied()
    }

    fn str(&self, k: &'a str) -> Result<&'a str, Error> {
        self.opt(k).ok_or_else(|| bad(format!("missing `{k}`")))
    }

    fn f64_or(&self, k: &'a str, default: f64) -> Result<f64, Error> {
        match self.opt(k) {
            Some(v) => v.parse().map_err(|_| bad(format!("`{k}` is not a number: {v}"))),
            None => Ok(default),
        }
    }

    fn f64(&self, k: &'a str) -> Result<f64, Error> {
        let v = self.str(k)?;
        v.parse().map_err(|_| bad(format!("`{k}` is not a number: {v}")))
    }

    fn usize(&self, k: &'a str) -> Result<usize, Error> {
        let v = self.str(k)?;
        v.parse().map_err(|_| bad(format!("`{k}` is not a count: {v}")))
    }

    fn vec3(&self, k: &'a str) -> Result<Vec3, Error> {
        let v = self.str(k)?;
        let c: Vec<f64> = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad(format!("`{k}` is not a vector: {v}")))?;
        match c.as_slice() {
            [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
            _ => Err(bad(format!("`{k}` needs three components"))),
        }
    }

    /// A single value broadcasts to all three channels.
    fn rgb_or(&self, k: &'a str, default: Rgb) -> Result<Rgb, Error> {
        let Some(v) = self.opt(k) else { return Ok(default) };
        let c: Vec<f64> = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad(format!("`{k}` is not a color: {v}")))?;
        match c.as_slice() {
            [g] => Ok([*g; 3]),
            [r, g, b] => Ok([*r, *g, *b]),
            _ => Err(bad(format!("`{k}` needs one or three components"))),
        }
    }

    fn finish(&self, kind: &str) -> Result<(), Error> {
        let used = self.used.borrow();
        match self.map.keys().find(|k| !used.contains(k)) {
            Some(k) => Err(bad(format!("unknown key `{k}` for {kind}"))),
            None => Ok(()),
        }
    }
}

fn load_image(path: &Path) -> Result<ImageBuffer, Error> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        return ImageBuffer::read_pfm(path);
    }
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.to_rgb32f();
    Ok(ImageBuffer { width: img.width() as usize, height: img.height() as usize, data: img.into_raw() })
}

impl Parser {
    fn path(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    fn decoder_index(&self, name: &str) -> Result<usize, Error> {
        self.scene.decoders.iter().position(|(n, _)| n == name).ok_or_else(|| Error::UnresolvedMaterial(format!("decoder {name}")))
    }

    fn sampling(&self, a: &Args, mean_latent: impl FnOnce() -> LatentBrdf) -> Result<NeuralSampling, Error> {
        match a.opt("sampling").unwrap_or("cosine") {
            "cosine" => Ok(NeuralSampling::Cosine),
            "proxy" => {
                let params = if let Some(v) = a.opt("proxy") {
                    let c: Vec<f64> = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad("proxy needs sigma,w"))?;
                    match c.as_slice() {
                        [sigma, w] => ProxyParams { sigma: *sigma, w: *w },
                        _ => return Err(bad("proxy needs sigma,w")),
                    }
                } else {
                    let name = a.str("sampler")?;
                    let net = self.samplers.get(name).ok_or_else(|| Error::UnresolvedMaterial(format!("sampler {name}")))?;
                    fit_params(net, &mean_latent())
                };
                Ok(NeuralSampling::Proxy(Arc::new(ProxyPdf::new(params))))
            }
            other => Err(bad(format!("unknown sampling `{other}`"))),
        }
    }

    fn statement(&mut self, line: &str) -> Result<(), Error> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let kind = parts[0];
        let a = Args::parse(&parts[1..])?;
        match kind {
            "camera" => {
                self.scene.camera = Some(Camera {
                    position: a.vec3("position")?,
                    look_at: a.vec3("look_at")?,
                    up: if a.map.contains_key("up") { a.vec3("up")? } else { a.opt("up"); Vec3::Z },
                    fov: a.f64_or("fov", 40.0)?,
                    width: a.usize("width")?,
                    height: a.usize("height")?,
                });
            }
            "decoder" => {
                let d = Decoder::load(&self.path(a.str("path")?))?;
                self.scene.add_decoder(a.str("name")?, Arc::new(d));
            }
            "sampler" => {
                let side = match a.opt("wi_side") {
                    Some(v) => v.parse().map_err(|_| bad("wi_side is not a count"))?,
                    None => 20,
                };
                let net = SamplerNet::load(&self.path(a.str("path")?), side)?;
                self.samplers.insert(a.str("name")?.to_owned(), Arc::new(net));
            }
            "normalmap" => {
                let img = load_image(&self.path(a.str("path")?))?;
                self.scene.normal_maps.push((a.str("name")?.to_owned(), Arc::new(NormalMap { image: img })));
            }
            "material" => {
                let name = a.str("name")?;
                let m = match a.str("type")? {
                    "lambert" => Material::Lambert { albedo: a.rgb_or("albedo", [0.5; 3])? },
                    "conductor" => Material::Conductor { alpha: a.f64("alpha")?, r0: a.rgb_or("r0", [1.0; 3])? },
                    "dielectric" => Material::Dielectric { alpha: a.f64("alpha")?, eta: a.f64("eta")? },
                    "tabulated" => {
                        let path = self.path(a.str("dataset")?);
                        let ds = match self.datasets.get(&path) {
                            Some(d) => d.clone(),
                            None => {
                                let d = Arc::new(Dataset::load(&path)?);
                                self.datasets.insert(path.clone(), d.clone());
                                d
                            }
                        };
                        let rec = a.usize("record")?;
                        let r = ds.records.get(rec).ok_or_else(|| bad(format!("record {rec} out of range")))?;
                        let table = TabulatedBrdf::new(ds.grid(), r.values.clone())?;
                        Material::Tabulated { table: Arc::new(table), tint: a.rgb_or("tint", [1.0; 3])? }
                    }
                    "latent" => {
                        let decoder = self.decoder_index(a.str("decoder")?)?;
                        let file = LatentFile::load(&self.path(a.str("latent")?))?;
                        let fp = self.scene.decoders[decoder].1.fingerprint();
                        if file.decoder != 0 && file.decoder != fp {
                            return Err(Error::UnresolvedMaterial(format!("{name}: latent was made for another decoder")));
                        }
                        let idx = match a.opt("index") {
                            Some(v) => v.parse::<usize>().map_err(|_| bad("index is not a count"))?,
                            None => 0,
                        };
                        let latent = file.entries.get(idx).cloned().ok_or_else(|| bad(format!("latent index {idx} out of range")))?;
                        let sampling = self.sampling(&a, || latent.clone())?;
                        Material::Latent { decoder, latent, sampling }
                    }
                    "texture" => {
                        let decoder = self.decoder_index(a.str("decoder")?)?;
                        let tex = LatentTexture::load(&self.path(a.str("texture")?))?;
                        let tex = Arc::new(tex);
                        let sampling = self.sampling(&a, || mean_latent(&tex))?;
                        Material::Texture { decoder, texture: tex, sampling }
                    }
                    other => return Err(bad(format!("unknown material type `{other}`"))),
                };
                self.scene.add_material(name, m);
            }
            "sphere" | "plane" | "rect" | "mesh" => {
                let shape = match kind {
                    "sphere" => Shape::Sphere { center: a.vec3("center")?, radius: a.f64("radius")? },
                    "plane" => Shape::Plane { point: a.vec3("point")?, normal: a.vec3("normal")?.normalize(), uv_scale: a.f64_or("uv_scale", 1.0)? },
                    "rect" => Shape::Rect { origin: a.vec3("origin")?, e1: a.vec3("e1")?, e2: a.vec3("e2")? },
                    _ => {
                        let t = if a.map.contains_key("translate") { a.vec3("translate")? } else { a.opt("translate"); Vec3::ZERO };
                        Shape::Mesh(Box::new(Mesh::load_obj(&self.path(a.str("path")?), a.f64_or("scale", 1.0)?, t)?))
                    }
                };
                self.scene.objects.push(Object {
                    shape,
                    material: Some(a.str("material")?.to_owned()),
                    normal_map: a.opt("normalmap").map(str::to_owned),
                    light: None,
                });
            }
            "light" => {
                let light = match a.str("type")? {
                    "point" => Light::Point { position: a.vec3("position")?, intensity: a.rgb_or("intensity", [1.0; 3])? },
                    "area" => Light::Area { origin: a.vec3("origin")?, e1: a.vec3("e1")?, e2: a.vec3("e2")?, radiance: a.rgb_or("radiance", [1.0; 3])? },
                    "env" => {
                        let map = match a.opt("map") {
                            Some(p) => Some(Arc::new(EnvMap::new(load_image(&self.path(p))?)?)),
                            None => None,
                        };
                        Light::Env { radiance: a.rgb_or("radiance", [1.0; 3])?, map }
                    }
                    other => return Err(bad(format!("unknown light type `{other}`"))),
                };
                if matches!(light, Light::Env { .. }) && self.scene.env_light().is_some() {
                    return Err(bad("only one environment light is supported"));
                }
                self.scene.add_light(light);
            }
            other => return Err(bad(format!("unknown statement `{other}`"))),
        }
        a.finish(kind)
    }
}

/// Mean latent of a texture's base level.
fn mean_latent(tex: &LatentTexture) -> LatentBrdf {
    let m = tex.level_mean(0);
    let channels = m.chunks_exact(LATENT_DIM).map(|c| std::array::from_fn(|i| c[i] as f32)).collect();
    LatentBrdf::new(channels).expect("texture channel count is validated on load")
}
