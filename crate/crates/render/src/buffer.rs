//! Deferred BRDF evaluation.
//!
//! The integrator records every `(light, view)` pair it needs at a bounce and
//! evaluates them together, so neural materials run one batched network pass
//! per decoder instead of one tiny pass per shading point.

use nbrdf_core::Direction;
use nbrdf_neural::decoder::Query;
use nbrdf_neural::{eval_brdf, LatentBrdf};

use crate::material::{Material, Rgb};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryTag {
    /// Light-sampled connection; the result adds to the path radiance.
    Light,
    /// BRDF-sampled continuation; the result scales the path throughput.
    Bsdf,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryEntry {
    pub path: u32,
    pub material: u32,
    /// Index into the buffer's latent arena for texture lookups.
    pub latent: Option<u32>,
    pub light: Direction,
    pub view: Direction,
    pub tag: QueryTag,
    /// Density of `light` under the strategy that produced it.
    pub pdf: f64,
    /// Factor applied to `f` when the result is consumed.
    pub weight: Rgb,
}

#[derive(Debug, Default)]
pub struct QueryBuffer {
    pub entries: Vec<QueryEntry>,
    pub latents: Vec<LatentBrdf>,
}

impl QueryBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push_latent(&mut self, l: LatentBrdf) -> u32 {
        self.latents.push(l);
        (self.latents.len() - 1) as u32
    }

    fn latent<'a>(&'a self, m: &'a Material, e: &QueryEntry) -> Option<&'a LatentBrdf> {
        match (m, e.latent) {
            (_, Some(i)) => Some(&self.latents[i as usize]),
            (Material::Latent { latent, .. }, None) => Some(latent),
            _ => None,
        }
    }

    /// Evaluates every entry, grouping neural queries per decoder, and
    /// empties the buffer. Results are in entry order.
    pub fn flush(&mut self, scene: &Scene) -> Vec<(QueryEntry, Rgb)> {
        let mut out: Vec<Rgb> = vec![[0.0; 3]; self.entries.len()];
        for (k, e) in self.entries.iter().enumerate() {
            if let Some(f) = scene.materials[e.material as usize].1.eval_analytic(e.light, e.view) {
                out[k] = f;
            }
        }
        for d in 0..scene.decoders.len() {
            let mut queries = Vec::new();
            let mut slots = Vec::new();
            for (k, e) in self.entries.iter().enumerate() {
                let m = &scene.materials[e.material as usize].1;
                if m.decoder() != Some(d) {
                    continue;
                }
                let Some(lat) = self.latent(m, e) else { continue };
                for (c, v) in lat.channels().iter().enumerate() {
                    queries.push(Query { latent: v, wi: e.light, wo: e.view });
                    slots.push((k, c, lat.n_channels()));
                }
            }
            if queries.is_empty() {
                continue;
            }
            let vals = scene.decoders[d].1.eval_queries(&queries);
            for ((k, c, n), v) in slots.into_iter().zip(vals) {
                let v = v.max(0.0) as f64;
                if n == 1 {
                    out[k] = [v; 3];
                } else {
                    out[k][c] = v;
                }
            }
        }
        self.latents.clear();
        self.entries.drain(..).zip(out).collect()
    }

    /// Reference path: evaluates one entry on its own.
    pub fn eval_single(&self, scene: &Scene, e: &QueryEntry) -> Rgb {
        let m = &scene.materials[e.material as usize].1;
        if let Some(f) = m.eval_analytic(e.light, e.view) {
            return f;
        }
        let (Some(d), Some(lat)) = (m.decoder(), self.latent(m, e)) else { return [0.0; 3] };
        match eval_brdf(&scene.decoders[d].1, lat, e.light, e.view) {
            Ok(v) if v.len() == 1 => [v[0] as f64; 3],
            Ok(v) => [v[0] as f64, v[1] as f64, v[2] as f64],
            Err(_) => [0.0; 3],
        }
    }
}
