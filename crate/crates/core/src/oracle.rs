//! Position-free Monte Carlo evaluation of layered BRDFs.
//!
//! The slab has unit thickness: depth 0 is the top dielectric interface and
//! depth 1 the bottom. Because illumination is uniform across the slab, a path
//! only tracks its depth and direction. The medium is homogeneous with
//! isotropic phase function, so `sigma_t` is the optical depth at normal
//! incidence.
//!
//! `eval_layered` walks a path in from `wi` and, at every scattering vertex,
//! connects to `wo` through the top interface with two strategies combined by
//! the power heuristic: sampling the top interface's transmission lobe from
//! `wo`, and reusing the vertex's own sampled continuation direction. Paths
//! that leave through the top by themselves contribute nothing, every exit is
//! accounted for by those connections.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::analytic::{eval_dielectric_reflect, ConductorParams, DielectricParams, Interface, ScatterEvent};
use crate::math::{grid_phi, grid_theta, sample_uniform_sphere, spherical_to_dir, Direction};
use crate::rng::RngStream;
use crate::stats::RunningStats;
use crate::Error;

/// Russian roulette starts after this many bounces.
pub const ROULETTE_DEPTH: usize = 8;
/// Hard cap on the number of bounces in one walk.
pub const MAX_DEPTH: usize = 64;
/// Deepest allowed nesting of stacks (a three-layer BRDF has depth 2).
pub const MAX_NESTING: usize = 3;

const INV_4PI: f64 = 1.0 / (4.0 * PI);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumParams {
    /// Single-scattering albedo.
    pub albedo: f64,
    /// Extinction coefficient; equals optical depth at normal incidence.
    pub sigma_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bottom {
    Conductor(ConductorParams),
    /// A layered BRDF used as a black-box bottom.
    Layered(Box<LayerStack>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub top: DielectricParams,
    pub medium: MediumParams,
    pub bottom: Bottom,
}

impl LayerStack {
    pub fn two_layer(top: DielectricParams, medium: MediumParams, bottom: ConductorParams) -> Self {
        Self { top, medium, bottom: Bottom::Conductor(bottom) }
    }

    pub fn nested(top: DielectricParams, medium: MediumParams, bottom: LayerStack) -> Self {
        Self { top, medium, bottom: Bottom::Layered(Box::new(bottom)) }
    }

    /// Number of stacked media; a plain two-layer stack has depth 1.
    pub fn depth(&self) -> usize {
        match &self.bottom {
            Bottom::Conductor(_) => 1,
            Bottom::Layered(inner) => 1 + inner.depth(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut s = self;
        let mut depth = 1;
        loop {
            let m = &s.medium;
            if !(0.0..=1.0).contains(&m.albedo) || !(m.sigma_t >= 0.0) || !(s.top.eta > 0.0) {
                return Err(Error::Format(format!("invalid layer parameters {:?}", s.medium)));
            }
            match &s.bottom {
                Bottom::Conductor(_) => return Ok(()),
                Bottom::Layered(inner) => {
                    depth += 1;
                    if depth > MAX_NESTING {
                        return Err(Error::Format(format!("stack nesting exceeds {MAX_NESTING}")));
                    }
                    s = inner;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

#[inline]
fn power_heuristic(a: f64, b: f64) -> f64 {
    let (a2, b2) = (a * a, b * b);
    if a2 + b2 == 0.0 {
        0.0
    } else {
        a2 / (a2 + b2)
    }
}

/// Transmittance from depth `z` straight up to the top along `up` (`up.z > 0`).
#[inline]
fn to_top(sigma_t: f64, z: f64, up: Direction) -> f64 {
    if sigma_t == 0.0 || z == 0.0 {
        1.0
    } else {
        (-sigma_t * z / up.z).exp()
    }
}

/// Internal connection direction produced by sampling the top interface's
/// transmission from the external target direction.
struct Connection {
    /// Direction from the vertex toward the top interface.
    up: Direction,
    /// `f_top(target, −up) / pdf`.
    ratio: f64,
    pdf: f64,
    delta: bool,
}

fn sample_connection(top: &Interface, target: Direction, rng: &mut RngStream) -> Option<Connection> {
    let s = top.sample(target, rng).ok()?;
    if s.event != ScatterEvent::Transmit {
        return None;
    }
    let t = s.direction;
    if s.delta {
        return Some(Connection { up: -t, ratio: 1.0 / t.z.abs(), pdf: f64::INFINITY, delta: true });
    }
    let f = top.eval(target, t);
    if !(f > 0.0) {
        return None;
    }
    Some(Connection { up: -t, ratio: f / s.pdf, pdf: s.pdf, delta: false })
}

/// Samples the next event along `dir` from depth `z`. Returns the new depth
/// and whether the path scattered in the medium.
#[inline]
fn free_flight(z: f64, dir: Direction, sigma_t: f64, rng: &mut RngStream) -> (f64, bool) {
    let boundary = if dir.z < 0.0 { 1.0 } else { 0.0 };
    if sigma_t == 0.0 {
        return (boundary, false);
    }
    let dz = (boundary - z).abs();
    let tau_b = sigma_t * dz / dir.z.abs();
    let tau = rng.exponential();
    if tau < tau_b {
        let step = tau / sigma_t * dir.z.abs();
        let nz = if dir.z < 0.0 { z + step } else { z - step };
        (nz.clamp(0.0, 1.0), true)
    } else {
        (boundary, false)
    }
}

/// One-path estimate of the layered BRDF between `start` and `target`.
fn walk_estimate(stack: &LayerStack, start: Direction, target: Direction, rng: &mut RngStream) -> f64 {
    let top = Interface::Dielectric(stack.top);
    let sigma_t = stack.medium.sigma_t;
    let mut total = eval_dielectric_reflect(&stack.top, target, start);

    let entry = match top.sample(start, rng) {
        Ok(s) if s.event == ScatterEvent::Transmit => s,
        _ => return total,
    };
    let mut beta = entry.weight;
    let mut dir = entry.direction;
    let mut z = 0.0;

    for bounce in 0..MAX_DEPTH {
        let (nz, scattered) = free_flight(z, dir, sigma_t, rng);
        z = nz;
        if scattered {
            beta *= stack.medium.albedo;
            if beta == 0.0 {
                break;
            }
            if let Some(c) = sample_connection(&top, target, rng) {
                let w = if c.delta { 1.0 } else { power_heuristic(c.pdf, INV_4PI) };
                total += beta * INV_4PI * to_top(sigma_t, z, c.up) * c.ratio * w;
            }
            let (u1, u2) = rng.next_2d();
            let next = sample_uniform_sphere(u1, u2);
            if next.z > 0.0 && !stack.top.is_index_matched() {
                let f = top.eval(target, -next);
                if f > 0.0 {
                    let w = power_heuristic(INV_4PI, top.pdf(target, -next));
                    total += beta * to_top(sigma_t, z, next) * f * w;
                }
            }
            dir = next;
        } else if dir.z < 0.0 {
            let view = -dir;
            match &stack.bottom {
                Bottom::Conductor(cp) => {
                    let bottom = Interface::Conductor(*cp);
                    if let Some(c) = sample_connection(&top, target, rng) {
                        let f = bottom.eval(c.up, view);
                        if f > 0.0 {
                            let w = if c.delta { 1.0 } else { power_heuristic(c.pdf, bottom.pdf(view, c.up)) };
                            total += beta * f * c.up.z * to_top(sigma_t, 1.0, c.up) * c.ratio * w;
                        }
                    }
                    let s = match bottom.sample(view, rng) {
                        Ok(s) => s,
                        Err(_) => break,
                    };
                    if !stack.top.is_index_matched() {
                        let f = top.eval(target, -s.direction);
                        if f > 0.0 {
                            let w = power_heuristic(s.pdf, top.pdf(target, -s.direction));
                            total += beta * s.weight * to_top(sigma_t, 1.0, s.direction) * f * w;
                        }
                    }
                    beta *= s.weight;
                    dir = s.direction;
                }
                Bottom::Layered(inner) => {
                    if let Some(c) = sample_connection(&top, target, rng) {
                        let f = walk_estimate(inner, view, c.up, rng);
                        if f > 0.0 {
                            total += beta * f * c.up.z * to_top(sigma_t, 1.0, c.up) * c.ratio;
                        }
                    }
                    let (next, w) = walk_sample(inner, view, rng);
                    if w == 0.0 {
                        break;
                    }
                    beta *= w;
                    dir = next;
                }
            }
        } else {
            match top.sample(-dir, rng) {
                Ok(s) if s.event == ScatterEvent::Reflect => {
                    beta *= s.weight;
                    dir = s.direction;
                }
                _ => break,
            }
        }
        if !(beta > 0.0) {
            break;
        }
        if bounce >= ROULETTE_DEPTH {
            let q = beta.min(1.0);
            if rng.next_f64() >= q {
                break;
            }
            beta /= q;
        }
    }
    total
}

/// Forward random walk from `wi` until the path leaves through the top.
/// Absorbed or truncated paths return zero throughput.
fn walk_sample(stack: &LayerStack, wi: Direction, rng: &mut RngStream) -> (Direction, f64) {
    let top = Interface::Dielectric(stack.top);
    let sigma_t = stack.medium.sigma_t;
    let entry = match top.sample(wi, rng) {
        Ok(s) => s,
        Err(_) => return (wi, 0.0),
    };
    if entry.event == ScatterEvent::Reflect {
        return (entry.direction, entry.weight);
    }
    let mut beta = entry.weight;
    let mut dir = entry.direction;
    let mut z = 0.0;
    for bounce in 0..MAX_DEPTH {
        let (nz, scattered) = free_flight(z, dir, sigma_t, rng);
        z = nz;
        if scattered {
            beta *= stack.medium.albedo;
            let (u1, u2) = rng.next_2d();
            dir = sample_uniform_sphere(u1, u2);
        } else if dir.z < 0.0 {
            match &stack.bottom {
                Bottom::Conductor(cp) => match Interface::Conductor(*cp).sample(-dir, rng) {
                    Ok(s) => {
                        beta *= s.weight;
                        dir = s.direction;
                    }
                    Err(_) => return (dir, 0.0),
                },
                Bottom::Layered(inner) => {
                    let (next, w) = walk_sample(inner, -dir, rng);
                    beta *= w;
                    dir = next;
                }
            }
        } else {
            match top.sample(-dir, rng) {
                Ok(s) if s.event == ScatterEvent::Reflect => {
                    beta *= s.weight;
                    dir = s.direction;
                }
                Ok(s) => return (s.direction, beta * s.weight),
                Err(_) => return (dir, 0.0),
            }
        }
        if !(beta > 0.0) {
            return (dir, 0.0);
        }
        if bounce >= ROULETTE_DEPTH {
            let q = beta.min(1.0);
            if rng.next_f64() >= q {
                return (dir, 0.0);
            }
            beta /= q;
        }
    }
    (dir, 0.0)
}

/// Unbiased estimate of the layered BRDF `f(wi, wo)` (cosine excluded).
pub fn eval_layered(
    stack: &LayerStack,
    wi: Direction,
    wo: Direction,
    n_paths: usize,
    rng: &mut RngStream,
) -> Result<OracleEstimate, Error> {
    if !(wi.z > 0.0) || !(wo.z > 0.0) {
        return Err(Error::InvalidDirection);
    }
    let n_paths = n_paths.max(1);
    let mut stats = RunningStats::default();
    for _ in 0..n_paths {
        stats.push(walk_estimate(stack, wi, wo, rng));
    }
    Ok(OracleEstimate { value: stats.mean(), stderr: stats.stderr(), n_paths })
}

/// Simulates one full random walk from `wi`; returns the exit direction and
/// the path throughput, whose expectation is the directional albedo.
pub fn sample_layered(stack: &LayerStack, wi: Direction, rng: &mut RngStream) -> Result<(Direction, f64), Error> {
    if !(wi.z > 0.0) {
        return Err(Error::InvalidDirection);
    }
    Ok(walk_sample(stack, wi, rng))
}

/// Stratified direction grid shared by both hemispheres of a tabulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub n_theta: usize,
    pub n_phi: usize,
}

impl GridSpec {
    pub const fn new(n_theta: usize, n_phi: usize) -> Self {
        Self { n_theta, n_phi }
    }

    pub fn directions_per_hemisphere(&self) -> usize {
        self.n_theta * self.n_phi
    }

    pub fn pairs(&self) -> usize {
        self.directions_per_hemisphere() * self.directions_per_hemisphere()
    }

    pub fn direction(&self, index: usize) -> Direction {
        let j = index / self.n_phi;
        let k = index % self.n_phi;
        spherical_to_dir(grid_theta(j, self.n_theta), grid_phi(k, self.n_phi))
    }

    pub fn directions(&self) -> Vec<Direction> {
        crate::math::stratified_hemisphere_grid(self.n_theta, self.n_phi)
    }

    /// Index of the isotropic representative of pair `(in, out)`: only the
    /// two elevations and the azimuth difference matter.
    #[inline]
    pub fn canonical_pair(&self, in_index: usize, out_index: usize) -> usize {
        let (ti, ki) = (in_index / self.n_phi, in_index % self.n_phi);
        let (to, ko) = (out_index / self.n_phi, out_index % self.n_phi);
        let dk = (ko + self.n_phi - ki) % self.n_phi;
        (ti * self.n_theta + to) * self.n_phi + dk
    }

    pub fn canonical_count(&self) -> usize {
        self.n_theta * self.n_theta * self.n_phi
    }

    /// Representative direction pair for a canonical index: `wi` at the first
    /// azimuth stratum, `wo` offset by the stored azimuth difference.
    pub fn canonical_directions(&self, canonical: usize) -> (Direction, Direction) {
        let dk = canonical % self.n_phi;
        let to = (canonical / self.n_phi) % self.n_theta;
        let ti = canonical / (self.n_phi * self.n_theta);
        let wi = spherical_to_dir(grid_theta(ti, self.n_theta), grid_phi(0, self.n_phi));
        let wo = spherical_to_dir(grid_theta(to, self.n_theta), grid_phi(dk, self.n_phi));
        (wi, wo)
    }

    /// Expands per-canonical-pair values into the dense `(in, out)` table.
    pub fn expand_canonical(&self, canonical: &[f32]) -> Vec<f32> {
        let n = self.directions_per_hemisphere();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for o in 0..n {
                out.push(canonical[self.canonical_pair(i, o)]);
            }
        }
        out
    }
}

/// Dense table of oracle estimates over all grid pairs, in (in θ-major,
/// out θ-major) order.
///
/// The stack is isotropic, so pairs sharing both elevations and the azimuth
/// difference are the same BRDF sample; each such class is estimated once with
/// its own stream and replicated. The result is deterministic for a seed and
/// independent of the thread count.
pub fn tabulate_layered(stack: &LayerStack, grid: GridSpec, n_paths: usize, seed: u64) -> Result<Vec<f32>, Error> {
    if grid.n_theta == 0 || grid.n_phi == 0 {
        return Err(Error::Format("empty direction grid".into()));
    }
    stack.validate()?;
    let canonical: Vec<f32> = (0..grid.canonical_count())
        .into_par_iter()
        .map(|c| {
            let (wi, wo) = grid.canonical_directions(c);
            let mut rng = RngStream::new(seed, c as u64);
            eval_layered(stack, wi, wo, n_paths, &mut rng).map(|e| e.value.max(0.0) as f32)
        })
        .collect::<Result<_, _>>()?;
    Ok(grid.expand_canonical(&canonical))
}
