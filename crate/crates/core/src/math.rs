//! Spherical geometry in the local shading frame.
//!
//! Every BRDF in this crate lives in a frame whose macro normal is `+z`.
//! World-space transforms belong to the renderer.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::Error;

/// Minimum length of `wi + wo` before the half vector is considered undefined.
pub const HALF_VECTOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A unit vector in the local shading frame.
pub type Direction = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    #[inline]
    pub fn normalize(self) -> Vec3 {
        self / self.length()
    }

    #[inline]
    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Polar angle measured from `+z`.
    pub fn theta(self) -> f64 {
        self.z.clamp(-1.0, 1.0).acos()
    }

    /// Azimuth in `[0, 2π)`.
    pub fn phi(self) -> f64 {
        let p = self.y.atan2(self.x);
        if p < 0.0 {
            p + 2.0 * PI
        } else {
            p
        }
    }

    pub fn as_f32(self) -> [f32; 3] {
        [self.x as f32, self.y as f32, self.z as f32]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        let inv = 1.0 / s;
        self * inv
    }
}

/// Half vector with its z-component dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedHalfVector {
    pub hx: f64,
    pub hy: f64,
}

impl ProjectedHalfVector {
    /// Projects a unit half vector, flipping it into the upper hemisphere first.
    pub fn from_half(h: Direction) -> Self {
        let s = if h.z < 0.0 { -1.0 } else { 1.0 };
        Self { hx: s * h.x, hy: s * h.y }
    }

    pub fn radius_squared(self) -> f64 {
        self.hx * self.hx + self.hy * self.hy
    }

    /// Lifts back onto the upper hemisphere; `None` outside the unit disk.
    pub fn lift(self) -> Option<Direction> {
        let r2 = self.radius_squared();
        if r2 > 1.0 {
            return None;
        }
        Some(Vec3::new(self.hx, self.hy, (1.0 - r2).max(0.0).sqrt()))
    }
}

pub fn spherical_to_dir(theta: f64, phi: f64) -> Direction {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

pub fn half_vector(wi: Direction, wo: Direction) -> Result<Direction, Error> {
    let s = wi + wo;
    let len = s.length();
    if !(len >= HALF_VECTOR_EPS) {
        return Err(Error::DegenerateHalfVector);
    }
    Ok(s / len)
}

/// Mirrors `w` about `h`: `2(w·h)h − w`.
#[inline]
pub fn reflect(w: Direction, h: Direction) -> Direction {
    2.0 * w.dot(h) * h - w
}

/// Density ratio `dω_h/dω_o = 1 / (4|ω_o·h|)` of the half-angle transform.
pub fn half_angle_jacobian(wo: Direction, h: Direction) -> Result<f64, Error> {
    let c = wo.dot(h).abs();
    if !(c > HALF_VECTOR_EPS) {
        return Err(Error::DegenerateHalfVector);
    }
    Ok(1.0 / (4.0 * c))
}

/// Stratum-center directions, θ-major: `θ_j = (j+½)/n_θ · π/2`, `φ_k = (k+½)/n_φ · 2π`.
pub fn stratified_hemisphere_grid(n_theta: usize, n_phi: usize) -> Vec<Direction> {
    let mut out = Vec::with_capacity(n_theta * n_phi);
    for j in 0..n_theta {
        let theta = grid_theta(j, n_theta);
        for k in 0..n_phi {
            out.push(spherical_to_dir(theta, grid_phi(k, n_phi)));
        }
    }
    out
}

#[inline]
pub fn grid_theta(j: usize, n_theta: usize) -> f64 {
    (j as f64 + 0.5) / n_theta as f64 * FRAC_PI_2
}

#[inline]
pub fn grid_phi(k: usize, n_phi: usize) -> f64 {
    (k as f64 + 0.5) / n_phi as f64 * 2.0 * PI
}

/// Builds an orthonormal basis `(t, b)` completing `n`.
pub fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    // Duff et al. 2017 branchless construction
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

/// Cosine-weighted hemisphere sample from two uniforms; pdf is `cosθ/π`.
pub fn sample_cosine_hemisphere(u1: f64, u2: f64) -> Direction {
    let (dx, dy) = concentric_disk(u1, u2);
    let z = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
    Vec3::new(dx, dy, z)
}

pub fn concentric_disk(u1: f64, u2: f64) -> (f64, f64) {
    let a = 2.0 * u1 - 1.0;
    let b = 2.0 * u2 - 1.0;
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, t) = if a.abs() > b.abs() {
        (a, std::f64::consts::FRAC_PI_4 * (b / a))
    } else {
        (b, FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (a / b))
    };
    (r * t.cos(), r * t.sin())
}

/// Uniform direction on the unit sphere; pdf is `1/(4π)`.
pub fn sample_uniform_sphere(u1: f64, u2: f64) -> Direction {
    let z = 1.0 - 2.0 * u1;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, eps: f64) -> bool {
        (a - b).length() < eps
    }

    #[test]
    fn spherical_examples() {
        assert!(close(spherical_to_dir(0.0, 0.0), Vec3::Z, 1e-15));
        assert!(close(spherical_to_dir(FRAC_PI_2 - 1e-9, 0.0), Vec3::new(1.0, 0.0, 0.0), 1e-8));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(spherical_to_dir(PI / 4.0, PI / 2.0), Vec3::new(0.0, s, s), 1e-12));
    }

    #[test]
    fn half_vector_examples() {
        assert_eq!(half_vector(Vec3::Z, Vec3::Z).unwrap(), Vec3::Z);
        let t = 0.7f64;
        let wi = Vec3::new(t.sin(), 0.0, t.cos());
        let wo = Vec3::new(-t.sin(), 0.0, t.cos());
        assert!(close(half_vector(wi, wo).unwrap(), Vec3::Z, 1e-12));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let h = half_vector(Vec3::Z, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(h, Vec3::new(s, 0.0, s), 1e-12));
        assert!(matches!(
            half_vector(Vec3::Z, -Vec3::Z),
            Err(Error::DegenerateHalfVector)
        ));
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(Vec3::Z, Vec3::Z), Vec3::Z);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(reflect(Vec3::Z, Vec3::new(s, 0.0, s)), Vec3::new(1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn jacobian_examples() {
        assert_abs_diff_eq!(half_angle_jacobian(Vec3::Z, Vec3::Z).unwrap(), 0.25);
        let wo = spherical_to_dir(PI / 3.0, 0.0); // cos = 0.5 against +z
        assert_abs_diff_eq!(half_angle_jacobian(wo, Vec3::Z).unwrap(), 0.5, epsilon = 1e-12);
        assert!(half_angle_jacobian(Vec3::new(1.0, 0.0, 0.0), Vec3::Z).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = stratified_hemisphere_grid(25, 25);
        assert_eq!(g.len(), 625);
        assert!(g.iter().all(|d| d.z > 0.0));
        let one = stratified_hemisphere_grid(1, 1);
        assert_eq!(one.len(), 1);
        assert!(close(one[0], spherical_to_dir(PI / 4.0, PI), 1e-15));
        // θ-major ordering
        assert!(g[0].z > g[25].z);
        assert_abs_diff_eq!(g[0].z, g[24].z, epsilon = 1e-15);
    }

    #[test]
    fn cosine_sample_is_upper_unit() {
        for i in 0..32 {
            for j in 0..32 {
                let d = sample_cosine_hemisphere((i as f64 + 0.5) / 32.0, (j as f64 + 0.5) / 32.0);
                assert!(d.z >= 0.0);
                assert_abs_diff_eq!(d.length(), 1.0, epsilon = 1e-12);
            }
        }
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, 0.0f64..(2.0 * PI)).prop_map(|(z, phi)| {
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
    }

    proptest! {
        #[test]
        fn reflect_about_half_vector_recovers_wo(wi in unit(), wo in unit()) {
            prop_assume!((wi + wo).length() > 1e-3);
            let h = half_vector(wi, wo).unwrap();
            prop_assert!(close(reflect(wi, h), wo, 1e-6));
        }

        #[test]
        fn reflect_is_an_involution(w in unit(), h in unit()) {
            prop_assume!(w.dot(h) > 1e-3);
            prop_assert!(close(reflect(reflect(w, h), h), w, 1e-9));
            prop_assert!((reflect(w, h).length() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn spherical_round_trip(theta in 0.0f64..1.5, phi in 0.0f64..6.28) {
            let d = spherical_to_dir(theta, phi);
            prop_assert!((d.length() - 1.0).abs() < 1e-6);
            prop_assert!((d.theta() - theta).abs() < 1e-9);
            if theta > 1e-6 {
                prop_assert!((d.phi() - phi).abs() < 1e-9);
            }
        }

        #[test]
        fn jacobian_positive(wo in unit(), h in unit()) {
            prop_assume!(wo.dot(h).abs() > 1e-6);
            prop_assert!(half_angle_jacobian(wo, h).unwrap() > 0.0);
        }

        #[test]
        fn basis_is_orthonormal(n in unit()) {
            let (t, b) = orthonormal_basis(n);
            prop_assert!(t.dot(n).abs() < 1e-9 && b.dot(n).abs() < 1e-9 && t.dot(b).abs() < 1e-9);
            prop_assert!((t.length() - 1.0).abs() < 1e-9 && (b.length() - 1.0).abs() < 1e-9);
        }
    }
}
