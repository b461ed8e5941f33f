//! GGX microfacet conductor and dielectric interfaces.
//!
//! Conventions: all directions point away from the surface. For BSDF values
//! `f(light, view)`, `light` is the direction radiance arrives from and `view`
//! the direction it leaves along. Refraction uses Walter et al.'s radiance
//! form, so transmission carries the `η_view²` factor. Masking-shadowing is the
//! separable Smith product and there is no multiple-scattering compensation.

use std::f64::consts::PI;

use crate::math::{half_vector, reflect, sample_cosine_hemisphere, Direction, Vec3};
use crate::rng::RngStream;
use crate::Error;

/// Below this distance from 1 a dielectric is treated as index matched.
pub const INDEX_MATCH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConductorParams {
    pub alpha: f64,
    pub r0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DielectricParams {
    pub alpha: f64,
    pub eta: f64,
}

impl DielectricParams {
    pub fn is_index_matched(&self) -> bool {
        (self.eta - 1.0).abs() < INDEX_MATCH_EPS
    }
}

pub fn ggx_ndf(cos_theta_h: f64, alpha: f64) -> f64 {
    if cos_theta_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let c2 = cos_theta_h * cos_theta_h;
    let d = c2 * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// Smith masking term for one direction against microfacet normal `h`
/// (with `h.z > 0`). Zero when `w` sees the back of the microfacet.
pub fn smith_g1(w: Direction, h: Direction, alpha: f64) -> f64 {
    if w.dot(h) * w.z <= 0.0 {
        return 0.0;
    }
    let z2 = w.z * w.z;
    if z2 >= 1.0 {
        return 1.0;
    }
    let tan2 = (1.0 - z2) / z2;
    2.0 / (1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

pub fn smith_g(wi: Direction, wo: Direction, h: Direction, alpha: f64) -> f64 {
    smith_g1(wi, h, alpha) * smith_g1(wo, h, alpha)
}

pub fn fresnel_schlick(cos_i: f64, r0: f64) -> f64 {
    let m = (1.0 - cos_i).clamp(0.0, 1.0);
    let m2 = m * m;
    r0 + (1.0 - r0) * m2 * m2 * m
}

/// Unpolarized Fresnel reflectance for light arriving at `cos_i` from a medium
/// into one whose relative index is `eta = n_t / n_i`. Returns 1 under total
/// internal reflection.
pub fn fresnel_dielectric(cos_i: f64, eta: f64) -> f64 {
    if (eta - 1.0).abs() < INDEX_MATCH_EPS {
        return 0.0;
    }
    let cos_i = cos_i.clamp(0.0, 1.0);
    let sin2_t = (1.0 - cos_i * cos_i) / (eta * eta);
    if sin2_t >= 1.0 {
        return 1.0;
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    let rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t);
    let rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t);
    0.5 * (rs * rs + rp * rp)
}

/// Rough conductor BRDF without the cosine term; zero unless both directions
/// are in the upper hemisphere.
pub fn eval_conductor(p: &ConductorParams, wi: Direction, wo: Direction) -> f64 {
    if wi.z <= 0.0 || wo.z <= 0.0 {
        return 0.0;
    }
    let h = match half_vector(wi, wo) {
        Ok(h) => h,
        Err(_) => return 0.0,
    };
    let d = ggx_ndf(h.z, p.alpha);
    let f = fresnel_schlick(0.5 * (wi.dot(h) + wo.dot(h)), p.r0);
    d * f * smith_g(wi, wo, h, p.alpha) / (4.0 * (wi.z * wo.z))
}

/// Reflection lobe of a rough dielectric seen from outside (the `+z` side).
pub fn eval_dielectric_reflect(p: &DielectricParams, wi: Direction, wo: Direction) -> f64 {
    if wi.z <= 0.0 || wo.z <= 0.0 || p.is_index_matched() {
        return 0.0;
    }
    let h = match half_vector(wi, wo) {
        Ok(h) => h,
        Err(_) => return 0.0,
    };
    let d = ggx_ndf(h.z, p.alpha);
    let f = fresnel_dielectric(0.5 * (wi.dot(h) + wo.dot(h)), p.eta);
    d * f * smith_g(wi, wo, h, p.alpha) / (4.0 * (wi.z * wo.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterEvent {
    Reflect,
    Transmit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicrofacetSample {
    /// Sampled continuation direction.
    pub direction: Direction,
    pub event: ScatterEvent,
    /// `f(direction, given)·|cos direction| / pdf`.
    pub weight: f64,
    /// Solid-angle density of `direction`; meaningless when `delta` is set.
    pub pdf: f64,
    /// Set for the index-matched pass-through, which is a Dirac lobe.
    pub delta: bool,
}

/// A single GGX interface usable as either layer of a stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interface {
    Conductor(ConductorParams),
    Dielectric(DielectricParams),
}

impl Interface {
    pub fn alpha(&self) -> f64 {
        match self {
            Interface::Conductor(c) => c.alpha,
            Interface::Dielectric(d) => d.alpha,
        }
    }

    /// Full BSDF value `f(light, view)` (cosine excluded). Dirac components
    /// evaluate to zero.
    pub fn eval(&self, light: Direction, view: Direction) -> f64 {
        match self {
            Interface::Conductor(c) => eval_conductor(c, light, view),
            Interface::Dielectric(d) => dielectric_eval(d, light, view),
        }
    }

    /// Density of sampling `sampled` when `sample` is called with `given`.
    pub fn pdf(&self, given: Direction, sampled: Direction) -> f64 {
        match self {
            Interface::Conductor(c) => conductor_pdf(c, given, sampled),
            Interface::Dielectric(d) => dielectric_pdf(d, given, sampled),
        }
    }

    pub fn sample(&self, given: Direction, rng: &mut RngStream) -> Result<MicrofacetSample, Error> {
        sample_microfacet(self, given, rng)
    }
}

/// GGX normal sampled with density `D(h)·cosθ_h`, always in the upper hemisphere.
fn sample_ggx_normal(alpha: f64, u1: f64, u2: f64) -> Direction {
    let tan2 = alpha * alpha * u1 / (1.0 - u1).max(1e-300);
    let cos_t = 1.0 / (1.0 + tan2).sqrt();
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

fn conductor_pdf(p: &ConductorParams, given: Direction, sampled: Direction) -> f64 {
    if given.z <= 0.0 || sampled.z <= 0.0 {
        return 0.0;
    }
    let h = match half_vector(given, sampled) {
        Ok(h) => h,
        Err(_) => return 0.0,
    };
    let c = given.dot(h);
    if c <= 0.0 {
        return 0.0;
    }
    ggx_ndf(h.z, p.alpha) * h.z / (4.0 * c)
}

/// Indices on the side of `w`: outside is vacuum, inside has index `eta`.
#[inline]
fn side_index(w: Direction, eta: f64) -> f64 {
    if w.z > 0.0 {
        1.0
    } else {
        eta
    }
}

/// Generalized half vector for a transmission pair, oriented to `+z`.
fn transmission_half(a: Direction, eta_a: f64, b: Direction, eta_b: f64) -> Option<Direction> {
    let s = a * eta_a + b * eta_b;
    let len = s.length();
    if !(len > 1e-12) {
        return None;
    }
    let mut h = s / len;
    if h.z < 0.0 {
        h = -h;
    }
    // both directions must see the microfacet from their own side
    if a.dot(h) * b.dot(h) >= 0.0 {
        return None;
    }
    Some(h)
}

fn reflection_half(a: Direction, b: Direction) -> Option<Direction> {
    let mut h = half_vector(a, b).ok()?;
    if h.z < 0.0 {
        h = -h;
    }
    Some(h)
}

fn dielectric_eval(p: &DielectricParams, light: Direction, view: Direction) -> f64 {
    if p.is_index_matched() || light.z == 0.0 || view.z == 0.0 {
        return 0.0;
    }
    if light.z * view.z > 0.0 {
        let h = match reflection_half(light, view) {
            Some(h) => h,
            None => return 0.0,
        };
        let rel = if view.z > 0.0 { p.eta } else { 1.0 / p.eta };
        let f = fresnel_dielectric(view.dot(h).abs(), rel);
        return ggx_ndf(h.z, p.alpha) * f * smith_g(light, view, h, p.alpha)
            / (4.0 * light.z.abs() * view.z.abs());
    }
    let eta_l = side_index(light, p.eta);
    let eta_v = side_index(view, p.eta);
    let h = match transmission_half(light, eta_l, view, eta_v) {
        Some(h) => h,
        None => return 0.0,
    };
    let li = light.dot(h);
    let vo = view.dot(h);
    let f = fresnel_dielectric(li.abs(), eta_v / eta_l);
    let denom = eta_l * li + eta_v * vo;
    let g = smith_g(light, view, h, p.alpha);
    (li * vo).abs() / (light.z * view.z).abs() * eta_v * eta_v * (1.0 - f) * ggx_ndf(h.z, p.alpha) * g
        / (denom * denom)
}

fn dielectric_pdf(p: &DielectricParams, given: Direction, sampled: Direction) -> f64 {
    if p.is_index_matched() || given.z == 0.0 || sampled.z == 0.0 {
        return 0.0;
    }
    let rel = if given.z > 0.0 { p.eta } else { 1.0 / p.eta };
    if given.z * sampled.z > 0.0 {
        let h = match reflection_half(given, sampled) {
            Some(h) => h,
            None => return 0.0,
        };
        let c = given.dot(h).abs();
        if given.dot(h) * given.z <= 0.0 || c == 0.0 {
            return 0.0;
        }
        let f = fresnel_dielectric(c, rel);
        return f * ggx_ndf(h.z, p.alpha) * h.z / (4.0 * c);
    }
    let eta_g = side_index(given, p.eta);
    let eta_s = side_index(sampled, p.eta);
    let h = match transmission_half(given, eta_g, sampled, eta_s) {
        Some(h) => h,
        None => return 0.0,
    };
    let gh = given.dot(h);
    if gh * given.z <= 0.0 {
        return 0.0;
    }
    let sh = sampled.dot(h);
    let f = fresnel_dielectric(gh.abs(), rel);
    let denom = eta_g * gh + eta_s * sh;
    (1.0 - f) * ggx_ndf(h.z, p.alpha) * h.z * eta_s * eta_s * sh.abs() / (denom * denom)
}

/// Samples a continuation direction from `given`.
///
/// Microfacet normals are drawn with density `D(h)·cosθ_h`; dielectrics then
/// choose reflection with probability equal to the Fresnel term, so total
/// internal reflection always reflects. Conductors always reflect.
pub fn sample_microfacet(
    p: &Interface,
    given: Direction,
    rng: &mut RngStream,
) -> Result<MicrofacetSample, Error> {
    match p {
        Interface::Conductor(c) => {
            if given.z <= 0.0 {
                return Err(Error::NullSample);
            }
            let (u1, u2) = rng.next_2d();
            let h = sample_ggx_normal(c.alpha, u1, u2);
            if given.dot(h) <= 0.0 {
                return Err(Error::NullSample);
            }
            let dir = reflect(given, h);
            if dir.z <= 0.0 {
                return Err(Error::NullSample);
            }
            let pdf = conductor_pdf(c, given, dir);
            if !(pdf > 0.0) {
                return Err(Error::NullSample);
            }
            let weight = eval_conductor(c, dir, given) * dir.z / pdf;
            Ok(MicrofacetSample { direction: dir, event: ScatterEvent::Reflect, weight, pdf, delta: false })
        }
        Interface::Dielectric(d) => {
            if d.is_index_matched() {
                return Ok(MicrofacetSample {
                    direction: -given,
                    event: ScatterEvent::Transmit,
                    weight: 1.0,
                    pdf: 1.0,
                    delta: true,
                });
            }
            let (u1, u2) = rng.next_2d();
            let h = sample_ggx_normal(d.alpha, u1, u2);
            let m = if given.z > 0.0 { h } else { -h };
            let c = given.dot(m);
            if c <= 0.0 {
                return Err(Error::NullSample);
            }
            let (eta_g, eta_t) = if given.z > 0.0 { (1.0, d.eta) } else { (d.eta, 1.0) };
            let f = fresnel_dielectric(c, eta_t / eta_g);
            let (dir, event) = if rng.next_f64() < f {
                (reflect(given, m), ScatterEvent::Reflect)
            } else {
                let e = eta_g / eta_t;
                let k = 1.0 - e * e * (1.0 - c * c);
                if k < 0.0 {
                    return Err(Error::NullSample);
                }
                ((-given) * e + m * (e * c - k.sqrt()), ScatterEvent::Transmit)
            };
            let dir = dir.normalize();
            let same_side = dir.z * given.z > 0.0;
            if (event == ScatterEvent::Reflect) != same_side || dir.z == 0.0 {
                return Err(Error::NullSample);
            }
            let pdf = dielectric_pdf(d, given, dir);
            if !(pdf > 0.0) || !pdf.is_finite() {
                return Err(Error::NullSample);
            }
            let weight = dielectric_eval(d, dir, given) * dir.z.abs() / pdf;
            Ok(MicrofacetSample { direction: dir, event, weight, pdf, delta: false })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlbedoEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Cosine-weighted Monte Carlo estimate of `∫ f(wi, wo) cosθ_o dω_o`.
pub fn directional_albedo<F>(eval_fn: F, wi: Direction, n: usize, rng: &mut RngStream) -> AlbedoEstimate
where
    F: Fn(Direction, Direction) -> f64,
{
    assert!(n >= 1);
    let mut stats = crate::stats::RunningStats::default();
    for _ in 0..n {
        let (u1, u2) = rng.next_2d();
        let wo = sample_cosine_hemisphere(u1, u2);
        stats.push(if wo.z > 0.0 { eval_fn(wi, wo) * PI } else { 0.0 });
    }
    AlbedoEstimate { value: stats.mean(), stderr: stats.stderr() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{spherical_to_dir, stratified_hemisphere_grid};
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn ndf_examples() {
        assert_abs_diff_eq!(ggx_ndf(1.0, 0.5), 4.0 / PI, epsilon = 1e-12);
        assert_abs_diff_eq!(ggx_ndf(1.0, 0.5), 1.27324, epsilon = 1e-5);
        // cos θ_h = 0 limit of the closed form is α²/π
        assert_abs_diff_eq!(ggx_ndf(1e-12, 0.3), 0.09 / PI, epsilon = 1e-9);
    }

    #[test]
    fn ndf_projected_area_normalizes() {
        // midpoint quadrature over (θ, φ); the integrand is azimuth independent
        for &alpha in &[0.1, 0.3, 0.5, 1.0] {
            let n = 256;
            let mut sum = 0.0;
            for j in 0..n {
                // θ = atan(t) resolves sharp lobes
                let t_max = 20.0 * alpha;
                let t = (j as f64 + 0.5) / n as f64 * t_max;
                let dt = t_max / n as f64;
                let theta = t.atan();
                let dtheta = dt / (1.0 + t * t);
                for _ in 0..n {
                    let c = theta.cos();
                    sum += ggx_ndf(c, alpha) * c * theta.sin() * dtheta * (2.0 * PI / n as f64);
                }
            }
            // mass beyond t_max is ~ 1 / (1 + (t_max/α)²)
            let t_max = 20.0 * alpha;
            let tail = alpha * alpha / (alpha * alpha + t_max * t_max);
            assert_abs_diff_eq!(sum + tail, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn smith_examples() {
        assert_abs_diff_eq!(smith_g(Vec3::Z, Vec3::Z, Vec3::Z, 0.5), 1.0);
        let w = spherical_to_dir(PI / 3.0, 0.0);
        assert_abs_diff_eq!(smith_g1(w, Vec3::Z, 0.5), 2.0 / (1.0 + 1.75f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(smith_g1(w, Vec3::Z, 0.5), 0.861002, epsilon = 1e-6);
        let wo = spherical_to_dir(1.2, 2.0);
        let h = half_vector(w, wo).unwrap();
        assert!(smith_g(w, wo, h, 1e-6) > 1.0 - 1e-9);
    }

    #[test]
    fn fresnel_examples() {
        assert_abs_diff_eq!(fresnel_schlick(1.0, 0.3), 0.3);
        assert_abs_diff_eq!(fresnel_schlick(0.0, 0.3), 1.0);
        assert_abs_diff_eq!(fresnel_schlick(0.5, 0.04), 0.07, epsilon = 1e-12);
        for &c in &[0.0f64, 0.2, 0.7, 1.0] {
            assert_abs_diff_eq!(fresnel_dielectric(c.max(1e-9), 1.0), 0.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(fresnel_dielectric(1.0, 1.5), 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(fresnel_dielectric(0.0, 1.5), 1.0, epsilon = 1e-12);
        // total internal reflection from inside glass
        assert_eq!(fresnel_dielectric(0.3, 1.0 / 1.5), 1.0);
    }

    #[test]
    fn conductor_examples() {
        let p = ConductorParams { alpha: 0.5, r0: 1.0 };
        assert_abs_diff_eq!(eval_conductor(&p, Vec3::Z, Vec3::Z), 1.0 / PI, epsilon = 1e-12);
        let p0 = ConductorParams { alpha: 0.5, r0: 0.0 };
        assert_eq!(eval_conductor(&p0, Vec3::Z, Vec3::Z), 0.0);
        assert_eq!(eval_conductor(&p, Vec3::Z, Vec3::new(0.0, 0.6, -0.8)), 0.0);
    }

    #[test]
    fn dielectric_examples() {
        let p = DielectricParams { alpha: 0.5, eta: 1.5 };
        assert_abs_diff_eq!(eval_dielectric_reflect(&p, Vec3::Z, Vec3::Z), 0.04 / PI, epsilon = 1e-12);
        let m = DielectricParams { alpha: 0.5, eta: 1.0 };
        for wi in stratified_hemisphere_grid(4, 4) {
            for wo in stratified_hemisphere_grid(4, 4) {
                assert_eq!(eval_dielectric_reflect(&m, wi, wo), 0.0);
            }
        }
    }

    #[test]
    fn reciprocity_is_exact() {
        let c = ConductorParams { alpha: 0.3, r0: 0.6 };
        let d = DielectricParams { alpha: 0.2, eta: 1.7 };
        let grid = stratified_hemisphere_grid(6, 7);
        for &a in &grid {
            for &b in &grid {
                assert_eq!(eval_conductor(&c, a, b), eval_conductor(&c, b, a));
                assert_eq!(eval_dielectric_reflect(&d, a, b), eval_dielectric_reflect(&d, b, a));
            }
        }
    }

    #[test]
    fn transmission_obeys_generalized_reciprocity() {
        // f(a, b) / η_b² = f(b, a) / η_a²
        let d = DielectricParams { alpha: 0.4, eta: 1.5 };
        let iface = Interface::Dielectric(d);
        let above = stratified_hemisphere_grid(5, 5);
        for &a in &above {
            for &b in &above {
                let below = Vec3::new(b.x, b.y, -b.z);
                let fab = iface.eval(a, below);
                let fba = iface.eval(below, a);
                if fab > 1e-12 {
                    assert_abs_diff_eq!(fab / (1.5 * 1.5), fba, epsilon = 1e-9 * fab.max(1.0));
                }
            }
        }
    }

    #[test]
    fn conductor_always_reflects() {
        let iface = Interface::Conductor(ConductorParams { alpha: 0.4, r0: 0.9 });
        let mut rng = RngStream::new(3, 0);
        let wi = spherical_to_dir(0.6, 0.2);
        for _ in 0..2000 {
            if let Ok(s) = sample_microfacet(&iface, wi, &mut rng) {
                assert_eq!(s.event, ScatterEvent::Reflect);
                assert!(s.direction.z > 0.0);
            }
        }
    }

    #[test]
    fn matched_dielectric_always_transmits_straight() {
        let iface = Interface::Dielectric(DielectricParams { alpha: 0.4, eta: 1.0 });
        let mut rng = RngStream::new(3, 0);
        let wi = spherical_to_dir(0.6, 0.2);
        for _ in 0..100 {
            let s = sample_microfacet(&iface, wi, &mut rng).unwrap();
            assert_eq!(s.event, ScatterEvent::Transmit);
            assert_eq!(s.direction, -wi);
            assert_eq!(s.weight, 1.0);
        }
    }

    /// Sampled weights satisfy `weight = f·cos/pdf` and `pdf` matches `Interface::pdf`.
    #[test]
    fn sample_weight_and_pdf_are_consistent() {
        let ifaces = [
            Interface::Conductor(ConductorParams { alpha: 0.3, r0: 0.5 }),
            Interface::Dielectric(DielectricParams { alpha: 0.3, eta: 1.5 }),
            Interface::Dielectric(DielectricParams { alpha: 0.05, eta: 1.2 }),
        ];
        let mut rng = RngStream::new(9, 1);
        for iface in &ifaces {
            for given in [spherical_to_dir(0.3, 1.0), Vec3::new(0.3, 0.2, -0.932_737_905_308_881_5).normalize()] {
                if matches!(iface, Interface::Conductor(_)) && given.z < 0.0 {
                    continue;
                }
                let mut ratio = crate::stats::RunningStats::default();
                for _ in 0..100_000 {
                    let s = match sample_microfacet(iface, given, &mut rng) {
                        Ok(s) => s,
                        Err(_) => continue,
                    };
                    let pdf = iface.pdf(given, s.direction);
                    assert_abs_diff_eq!(pdf, s.pdf, epsilon = 1e-9 * pdf.max(1.0));
                    let f = iface.eval(s.direction, given);
                    ratio.push(s.weight * s.pdf / (f * s.direction.z.abs()));
                }
                assert_abs_diff_eq!(ratio.mean(), 1.0, epsilon = 1e-9);
            }
        }
    }

    /// Total sampled density integrates to at most one over the sphere and
    /// matches the fraction of non-null samples.
    #[test]
    fn dielectric_pdf_integrates_to_acceptance_rate() {
        let d = Interface::Dielectric(DielectricParams { alpha: 0.35, eta: 1.45 });
        for given in [spherical_to_dir(0.4, 0.0), Vec3::new(0.35, 0.0, -(1.0f64 - 0.35 * 0.35).sqrt())] {
            let n = 600;
            let mut integral = 0.0;
            for j in 0..n {
                let z = -1.0 + (j as f64 + 0.5) * 2.0 / n as f64;
                let r = (1.0 - z * z).sqrt();
                for k in 0..n {
                    let phi = (k as f64 + 0.5) * 2.0 * PI / n as f64;
                    let w = Vec3::new(r * phi.cos(), r * phi.sin(), z);
                    integral += d.pdf(given, w) * (2.0 / n as f64) * (2.0 * PI / n as f64);
                }
            }
            let mut rng = RngStream::new(5, 5);
            let trials = 200_000;
            let ok = (0..trials).filter(|_| sample_microfacet(&d, given, &mut rng).is_ok()).count();
            let rate = ok as f64 / trials as f64;
            assert!((integral - rate).abs() < 0.01, "integral {integral} vs acceptance {rate}");
        }
    }

    /// Histogram of sampled microfacet normals against `D(h)cosθ_h`.
    #[test]
    fn sampled_normals_follow_ndf_chi_square() {
        const BINS: usize = 32;
        const N: usize = 1_000_000;
        let alpha = 0.35;
        let mut rng = RngStream::new(21, 0);
        let mut counts = vec![0f64; BINS * BINS];
        // bins uniform in cosθ_h and φ
        for _ in 0..N {
            let (u1, u2) = rng.next_2d();
            let h = sample_ggx_normal(alpha, u1, u2);
            let i = ((1.0 - h.z) * BINS as f64).min(BINS as f64 - 1.0) as usize;
            let j = (h.phi() / (2.0 * PI) * BINS as f64).min(BINS as f64 - 1.0) as usize;
            counts[i * BINS + j] += 1.0;
        }
        // P(cosθ_h >= c) = t² / (α² + t²) with t² = tan²θ_h
        let tail = |c: f64| {
            if c <= 0.0 {
                return 1.0;
            }
            let t2 = (1.0 - c * c) / (c * c);
            t2 / (alpha * alpha + t2)
        };
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        let mut pooled_obs = 0.0;
        let mut pooled_exp = 0.0;
        for i in 0..BINS {
            let c_hi = 1.0 - i as f64 / BINS as f64;
            let c_lo = 1.0 - (i + 1) as f64 / BINS as f64;
            let p_band = tail(c_lo) - tail(c_hi);
            for j in 0..BINS {
                let e = p_band / BINS as f64 * N as f64;
                let o = counts[i * BINS + j];
                if e < 5.0 {
                    pooled_obs += o;
                    pooled_exp += e;
                    continue;
                }
                chi2 += (o - e) * (o - e) / e;
                dof += 1;
            }
        }
        if pooled_exp > 5.0 {
            chi2 += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
            dof += 1;
        }
        let p = 1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} dof {dof} p {p}");
    }

    #[test]
    fn albedo_examples() {
        let mut rng = RngStream::new(1, 2);
        let wi = spherical_to_dir(0.5, 0.0);
        let lam = directional_albedo(|_, _| 1.0 / PI, wi, 1000, &mut rng);
        assert!((lam.value - 1.0).abs() <= 3.0 * lam.stderr + 1e-12);
        let zero = directional_albedo(|_, _| 0.0, wi, 1000, &mut rng);
        assert_eq!(zero.value, 0.0);
        let p = ConductorParams { alpha: 0.5, r0: 1.0 };
        let a = directional_albedo(|i, o| eval_conductor(&p, i, o), Vec3::Z, 100_000, &mut rng);
        assert!(a.value <= 1.0 + 3.0 * a.stderr);
    }

    #[test]
    fn albedo_bounded_over_table_ranges() {
        let mut rng = RngStream::new(77, 0);
        for k in 0..20 {
            let alpha = (0.216 + 0.784 * rng.next_f64()).powi(3);
            let r0 = rng.next_f64();
            let eta = 1.05 + 0.95 * rng.next_f64();
            let wi = spherical_to_dir(rng.next_f64() * FRAC_PI_2 * 0.98, 0.0);
            let c = ConductorParams { alpha, r0 };
            let d = DielectricParams { alpha, eta };
            let a = directional_albedo(|i, o| eval_conductor(&c, i, o), wi, 20_000, &mut rng);
            assert!(a.value <= 1.0 + 3.0 * a.stderr, "conductor draw {k}: {a:?}");
            let b = directional_albedo(|i, o| eval_dielectric_reflect(&d, i, o), wi, 20_000, &mut rng);
            assert!(b.value <= 1.0 + 3.0 * b.stderr, "dielectric draw {k}: {b:?}");
        }
    }
}
