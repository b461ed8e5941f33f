//! Ray-object intersection: spheres, planes, rectangles and triangle meshes.

use std::f64::consts::PI;
use std::path::Path;

use nbrdf_core::math::orthonormal_basis;
use nbrdf_core::Vec3;

use crate::Error;

pub const RAY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    /// Geometric normal, not flipped toward the ray.
    pub normal: Vec3,
    /// Interpolated normal for meshes with vertex normals, else `normal`.
    pub shading_normal: Vec3,
    /// Direction of increasing `u`, roughly perpendicular to the normal.
    pub tangent: Vec3,
    pub uv: [f64; 2],
    /// Isotropic texture-space length per unit of world length.
    pub uv_per_length: f64,
}

#[derive(Debug, Clone)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Infinite plane; `uv` is the in-plane position divided by `uv_scale`.
    Plane { point: Vec3, normal: Vec3, uv_scale: f64 },
    /// Parallelogram `origin + s·e1 + t·e2`, `s, t ∈ [0, 1]`.
    Rect { origin: Vec3, e1: Vec3, e2: Vec3 },
    Mesh(Box<Mesh>),
}

impl Shape {
    pub fn intersect(&self, ray: &Ray, t_max: f64) -> Option<SurfaceHit> {
        match self {
            Shape::Sphere { center, radius } => intersect_sphere(*center, *radius, ray, t_max),
            Shape::Plane { point, normal, uv_scale } => {
                let denom = ray.dir.dot(*normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (*point - ray.origin).dot(*normal) / denom;
                if !(t > RAY_EPS && t < t_max) {
                    return None;
                }
                let p = ray.at(t);
                let (tu, tv) = orthonormal_basis(*normal);
                let d = p - *point;
                let uv = [(d.dot(tu) / uv_scale).rem_euclid(1.0), (d.dot(tv) / uv_scale).rem_euclid(1.0)];
                Some(SurfaceHit { t, point: p, normal: *normal, shading_normal: *normal, tangent: tu, uv, uv_per_length: 1.0 / uv_scale })
            }
            Shape::Rect { origin, e1, e2 } => {
                let n = e1.cross(*e2);
                let (s, u, v) = intersect_parallelogram(*origin, *e1, *e2, ray)?;
                if !(s > RAY_EPS && s < t_max) {
                    return None;
                }
                let normal = n.normalize();
                let tangent = e1.normalize();
                let uv_per_length = 1.0 / (e1.length() * e2.length()).sqrt();
                Some(SurfaceHit { t: s, point: ray.at(s), normal, shading_normal: normal, tangent, uv: [u, v], uv_per_length })
            }
            Shape::Mesh(m) => m.intersect(ray, t_max),
        }
    }

    /// Surface area, infinite for planes.
    pub fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Plane { .. } => f64::INFINITY,
            Shape::Rect { e1, e2, .. } => e1.cross(*e2).length(),
            Shape::Mesh(m) => m.triangles().map(|[a, b, c]| 0.5 * (b - a).cross(c - a).length()).sum(),
        }
    }
}

fn intersect_sphere(center: Vec3, radius: f64, ray: &Ray, t_max: f64) -> Option<SurfaceHit> {
    let oc = ray.origin - center;
    let a = ray.dir.length_squared();
    let half_b = oc.dot(ray.dir);
    let c = oc.length_squared() - radius * radius;
    let disc = half_b * half_b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t = (-half_b - sq) / a;
    if !(t > RAY_EPS * radius.max(1.0)) {
        t = (-half_b + sq) / a;
    }
    if !(t > RAY_EPS * radius.max(1.0) && t < t_max) {
        return None;
    }
    let p = ray.at(t);
    let n = (p - center) / radius;
    let theta = n.z.clamp(-1.0, 1.0).acos();
    let phi = n.y.atan2(n.x).rem_euclid(2.0 * PI);
    let mut tangent = Vec3::new(-n.y, n.x, 0.0);
    if tangent.length_squared() < 1e-12 {
        tangent = Vec3::new(1.0, 0.0, 0.0);
    }
    let sin_t = theta.sin().max(1e-3);
    let uv_per_length = 1.0 / ((2.0 * PI * radius * sin_t) * (PI * radius)).sqrt();
    Some(SurfaceHit {
        t,
        point: p,
        normal: n,
        shading_normal: n,
        tangent: tangent.normalize(),
        uv: [phi / (2.0 * PI), theta / PI],
        uv_per_length,
    })
}

/// Returns `(t, s, u)` with the hit at `origin + s·e1 + u·e2`.
fn intersect_parallelogram(origin: Vec3, e1: Vec3, e2: Vec3, ray: &Ray) -> Option<(f64, f64, f64)> {
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = ray.origin - origin;
    let s = tv.dot(p) * inv;
    if !(0.0..=1.0).contains(&s) {
        return None;
    }
    let q = tv.cross(e1);
    let u = ray.dir.dot(q) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    Some((e2.dot(q) * inv, s, u))
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { lo: Vec3::splat(f64::INFINITY), hi: Vec3::splat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: Vec3) {
        self.lo = Vec3::new(self.lo.x.min(p.x), self.lo.y.min(p.y), self.lo.z.min(p.z));
        self.hi = Vec3::new(self.hi.x.max(p.x), self.hi.y.max(p.y), self.hi.z.max(p.z));
    }

    fn hit(&self, o: Vec3, inv_d: Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for (lo, hi, o, inv) in [(self.lo.x, self.hi.x, o.x, inv_d.x), (self.lo.y, self.hi.y, o.y, inv_d.y), (self.lo.z, self.hi.z, o.z, inv_d.z)] {
            let (a, b) = ((lo - o) * inv, (hi - o) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: first triangle; interior: right child (left is the next node).
    index: usize,
    count: usize,
}

/// Indexed triangle mesh with a median-split BVH.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub indices: Vec<[usize; 3]>,
    nodes: Vec<BvhNode>,
}

const LEAF_SIZE: usize = 4;

impl Mesh {
    /// `normals` and `uvs` are per-vertex and may be empty.
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, uvs: Vec<[f64; 2]>, indices: Vec<[usize; 3]>) -> Result<Self, Error> {
        let n = positions.len();
        if indices.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Format("triangle index out of range".into()));
        }
        if (!normals.is_empty() && normals.len() != n) || (!uvs.is_empty() && uvs.len() != n) {
            return Err(Error::Format("per-vertex attribute count mismatch".into()));
        }
        let mut mesh = Self { positions, normals, uvs, indices, nodes: Vec::new() };
        mesh.build();
        Ok(mesh)
    }

    /// Loads a Wavefront OBJ file, merging all its models, with a transform applied to positions.
    pub fn load_obj(path: &Path, scale: f64, translate: Vec3) -> Result<Self, Error> {
        let opts = tobj::LoadOptions { triangulate: true, single_index: true, ..Default::default() };
        let (models, _) = tobj::load_obj(path, &opts).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (mut pos, mut nrm, mut uvs, mut idx) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut all_normals = true;
        let mut all_uvs = true;
        for m in &models {
            let mesh = &m.mesh;
            let base = pos.len();
            let nv = mesh.positions.len() / 3;
            pos.extend(mesh.positions.chunks_exact(3).map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) * scale + translate));
            all_normals &= mesh.normals.len() == 3 * nv;
            all_uvs &= mesh.texcoords.len() == 2 * nv;
            nrm.extend(mesh.normals.chunks_exact(3).map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64).normalize()));
            uvs.extend(mesh.texcoords.chunks_exact(2).map(|p| [p[0] as f64, 1.0 - p[1] as f64]));
            idx.extend(mesh.indices.chunks_exact(3).map(|t| [base + t[0] as usize, base + t[1] as usize, base + t[2] as usize]));
        }
        if !all_normals {
            nrm.clear();
        }
        if !all_uvs {
            uvs.clear();
        }
        Self::new(pos, nrm, uvs, idx)
    }

    pub fn triangles(&self) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        self.indices.iter().map(|t| [self.positions[t[0]], self.positions[t[1]], self.positions[t[2]]])
    }

    fn centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.indices[t];
        (self.positions[a] + self.positions[b] + self.positions[c]) / 3.0
    }

    fn build(&mut self) {
        self.nodes.clear();
        if self.indices.is_empty() {
            return;
        }
        let mut order: Vec<usize> = (0..self.indices.len()).collect();
        self.build_node(&mut order, 0);
        let tris: Vec<[usize; 3]> = order.iter().map(|&i| self.indices[i]).collect();
        self.indices = tris;
    }

    fn build_node(&mut self, order: &mut [usize], first: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in order.iter() {
            for v in self.indices[t] {
                bounds.grow(self.positions[v]);
            }
            cb.grow(self.centroid(t));
        }
        let me = self.nodes.len();
        self.nodes.push(BvhNode { bounds, index: first, count: order.len() });
        if order.len() <= LEAF_SIZE {
            return me;
        }
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let key = |m: &Mesh, t: usize| {
            let c = m.centroid(t);
            [c.x, c.y, c.z][axis]
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| key(self, a).total_cmp(&key(self, b)));
        let (l, r) = order.split_at_mut(mid);
        self.build_node(l, first);
        let right = self.build_node(r, first + mid);
        self.nodes[me].index = right;
        self.nodes[me].count = 0;
        me
    }

    pub fn intersect(&self, ray: &Ray, t_max: f64) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv_d = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        let mut t_best = t_max;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = self.nodes[i];
            if !node.bounds.hit(ray.origin, inv_d, t_best) {
                continue;
            }
            if node.count > 0 {
                for t in node.index..node.index + node.count {
                    let [a, b, c] = self.indices[t];
                    let (pa, pb, pc) = (self.positions[a], self.positions[b], self.positions[c]);
                    if let Some((s, u, v)) = intersect_triangle(pa, pb - pa, pc - pa, ray) {
                        if s > RAY_EPS && s < t_best {
                            t_best = s;
                            best = Some((s, t, u, v));
                        }
                    }
                }
            } else {
                stack.push(node.index);
                stack.push(i + 1);
            }
        }
        let (t, tri, u, v) = best?;
        Some(self.surface(ray, t, tri, u, v))
    }

    fn surface(&self, ray: &Ray, t: f64, tri: usize, u: f64, v: f64) -> SurfaceHit {
        let [a, b, c] = self.indices[tri];
        let (pa, pb, pc) = (self.positions[a], self.positions[b], self.positions[c]);
        let (e1, e2) = (pb - pa, pc - pa);
        let normal = e1.cross(e2).normalize();
        let w = 1.0 - u - v;
        let shading_normal = if self.normals.is_empty() {
            normal
        } else {
            let n = self.normals[a] * w + self.normals[b] * u + self.normals[c] * v;
            if n.length_squared() > 1e-20 { n.normalize() } else { normal }
        };
        let (uv, tangent, uv_per_length) = if self.uvs.is_empty() {
            ([u, v], e1.normalize(), 1.0 / (0.5 * e1.cross(e2).length()).sqrt().max(1e-12))
        } else {
            let (ta, tb, tc) = (self.uvs[a], self.uvs[b], self.uvs[c]);
            let uv = [ta[0] * w + tb[0] * u + tc[0] * v, ta[1] * w + tb[1] * u + tc[1] * v];
            let (du1, dv1) = (tb[0] - ta[0], tb[1] - ta[1]);
            let (du2, dv2) = (tc[0] - ta[0], tc[1] - ta[1]);
            let det = du1 * dv2 - du2 * dv1;
            let tangent = if det.abs() > 1e-14 { (e1 * dv2 - e2 * dv1) / det } else { e1 };
            let tangent = if tangent.length_squared() > 1e-20 { tangent.normalize() } else { e1.normalize() };
            let area_w = e1.cross(e2).length();
            (uv, tangent, (det.abs() / area_w.max(1e-20)).sqrt())
        };
        SurfaceHit { t, point: ray.at(t), normal, shading_normal, tangent, uv, uv_per_length }
    }
}

fn intersect_triangle(origin: Vec3, e1: Vec3, e2: Vec3, ray: &Ray) -> Option<(f64, f64, f64)> {
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = ray.origin - origin;
    let u = tv.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = tv.cross(e1);
    let v = ray.dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(q) * inv, u, v))
}
