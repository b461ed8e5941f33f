//! Surface materials in the local shading frame (`+z` is the normal).
//!
//! Evaluation order is `f(light, view)`. Neural materials are evaluated
//! through a [`crate::buffer::QueryBuffer`]; everything else evaluates inline.

use std::f64::consts::FRAC_1_PI;
use std::sync::Arc;

use nbrdf_core::analytic::{eval_conductor, eval_dielectric_reflect, ConductorParams, DielectricParams, Interface};
use nbrdf_core::dataset::TabulatedBrdf;
use nbrdf_core::math::sample_cosine_hemisphere;
use nbrdf_core::{Direction, RngStream};
use nbrdf_neural::sampler::ProxyPdf;
use nbrdf_neural::texture::LatentTexture;
use nbrdf_neural::LatentBrdf;

pub type Rgb = [f64; 3];

/// Importance sampling for neural materials.
#[derive(Debug, Clone)]
pub enum NeuralSampling {
    Cosine,
    Proxy(Arc<ProxyPdf>),
}

#[derive(Debug, Clone)]
pub enum Material {
    Lambert { albedo: Rgb },
    Conductor { alpha: f64, r0: Rgb },
    /// Reflection-only rough dielectric, gray.
    Dielectric { alpha: f64, eta: f64 },
    /// Tabulated reference BRDF (typically a layered-oracle record), scaled per channel.
    Tabulated { table: Arc<TabulatedBrdf>, tint: Rgb },
    Latent { decoder: usize, latent: LatentBrdf, sampling: NeuralSampling },
    Texture { decoder: usize, texture: Arc<LatentTexture>, sampling: NeuralSampling },
}

impl Material {
    pub fn is_neural(&self) -> bool {
        matches!(self, Material::Latent { .. } | Material::Texture { .. })
    }

    pub fn decoder(&self) -> Option<usize> {
        match self {
            Material::Latent { decoder, .. } | Material::Texture { decoder, .. } => Some(*decoder),
            _ => None,
        }
    }

    /// Inline evaluation; `None` for neural materials.
    pub fn eval_analytic(&self, light: Direction, view: Direction) -> Option<Rgb> {
        if light.z <= 0.0 || view.z <= 0.0 {
            return Some([0.0; 3]);
        }
        Some(match self {
            Material::Lambert { albedo } => albedo.map(|a| a * FRAC_1_PI),
            Material::Conductor { alpha, r0 } => r0.map(|r0| eval_conductor(&ConductorParams { alpha: *alpha, r0 }, light, view)),
            Material::Dielectric { alpha, eta } => [eval_dielectric_reflect(&DielectricParams { alpha: *alpha, eta: *eta }, light, view); 3],
            Material::Tabulated { table, tint } => {
                let f = table.eval(light, view);
                tint.map(|t| t * f)
            }
            Material::Latent { .. } | Material::Texture { .. } => return None,
        })
    }

    fn lobe_interface(&self) -> Option<Interface> {
        match self {
            Material::Conductor { alpha, .. } | Material::Dielectric { alpha, .. } => {
                Some(Interface::Conductor(ConductorParams { alpha: *alpha, r0: 1.0 }))
            }
            _ => None,
        }
    }

    fn proxy(&self) -> Option<&ProxyPdf> {
        match self {
            Material::Latent { sampling: NeuralSampling::Proxy(p), .. } | Material::Texture { sampling: NeuralSampling::Proxy(p), .. } => Some(p),
            _ => None,
        }
    }

    /// Draws a light direction given the view direction. Returns the
    /// direction and its solid-angle density, or `None` for a null sample.
    pub fn sample(&self, view: Direction, rng: &mut RngStream) -> Option<(Direction, f64)> {
        if view.z <= 0.0 {
            return None;
        }
        if let Some(i) = self.lobe_interface() {
            return i.sample(view, rng).ok().map(|s| (s.direction, s.pdf));
        }
        if let Some(p) = self.proxy() {
            return Some(p.sample(view, rng));
        }
        let (a, b) = rng.next_2d();
        let l = sample_cosine_hemisphere(a, b);
        (l.z > 0.0).then_some((l, l.z * FRAC_1_PI))
    }

    /// Density with which [`Material::sample`] produces `light`.
    pub fn pdf(&self, view: Direction, light: Direction) -> f64 {
        if view.z <= 0.0 || light.z <= 0.0 {
            return 0.0;
        }
        if let Some(i) = self.lobe_interface() {
            return i.pdf(view, light);
        }
        if let Some(p) = self.proxy() {
            return p.pdf(view, light);
        }
        light.z * FRAC_1_PI
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbrdf_core::math::spherical_to_dir;
    use nbrdf_neural::sampler::ProxyParams;

    #[test]
    fn sampled_pdf_matches_pdf() {
        let mats = [
            Material::Lambert { albedo: [0.5; 3] },
            Material::Conductor { alpha: 0.2, r0: [0.9, 0.5, 0.2] },
            Material::Dielectric { alpha: 0.05, eta: 1.5 },
            Material::Latent {
                decoder: 0,
                latent: LatentBrdf::mono([0.0; 32]),
                sampling: NeuralSampling::Proxy(Arc::new(ProxyPdf::new(ProxyParams { sigma: 0.1, w: 0.3 }))),
            },
        ];
        let view = spherical_to_dir(0.7, 1.1);
        let mut rng = RngStream::new(3, 0);
        for m in &mats {
            for _ in 0..200 {
                if let Some((l, p)) = m.sample(view, &mut rng) {
                    assert!(l.z > 0.0);
                    assert_eq!(p, m.pdf(view, l));
                }
            }
        }
    }
}
