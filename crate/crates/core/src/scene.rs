//! Synthetic ground-truth world and simulated RGB-D sensor.
//!
//! Scenes are built from colored axis-aligned boxes and triangles. The sensor
//! is an ideal pinhole ray caster whose depth channel (camera-frame z of the
//! first hit) is corrupted by zero-mean Gaussian noise with a standard
//! deviation proportional to the depth.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::rng::{self, Rng};
use crate::voxel::VoxelMap;

/// Invalid-depth sentinel shared by measured and rendered depth maps.
pub const INVALID_DEPTH: f64 = 0.0;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: &Vector3<f64>, eps: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - eps && p[a] <= self.max[a] + eps)
    }

    /// Slab test. Returns `(t_enter, t_exit, enter_axis, exit_axis)`.
    fn slab(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, usize, usize)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut a0, mut a1) = (0, 0);
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            if ta > t0 {
                t0 = ta;
                a0 = a;
            }
            if tb < t1 {
                t1 = tb;
                a1 = a;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1, a0, a1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
        rgb: Vector3<f64>,
    },
    Triangle {
        vertices: [Vector3<f64>; 3],
        rgb: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub color: Vector3<f64>,
    /// Unit normal facing the ray origin.
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

impl Primitive {
    pub fn rgb(&self) -> Vector3<f64> {
        match self {
            Primitive::Box { rgb, .. } | Primitive::Triangle { rgb, .. } => *rgb,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Primitive::Box { min, max, .. } => Aabb::new(*min, *max),
            Primitive::Triangle { vertices: v, .. } => Aabb::new(
                v[0].inf(&v[1]).inf(&v[2]),
                v[0].sup(&v[1]).sup(&v[2]),
            ),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Primitive::Box { min, max, .. } => {
                let e = max - min;
                2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
            }
            Primitive::Triangle { vertices: v, .. } => 0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm(),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
        let ok = match self {
            Primitive::Box { min, max, rgb } => {
                finite(min) && finite(max) && (0..3).all(|a| max[a] > min[a]) && in_unit_cube(rgb)
            }
            Primitive::Triangle { vertices, rgb } => {
                vertices.iter().all(finite) && self.area() > 1e-12 && in_unit_cube(rgb)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!("degenerate primitive {self:?}")))
        }
    }

    /// Nearest intersection with `t > RAY_EPS`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Box { min, max, .. } => {
                let (t0, t1, a0, a1) = Aabb::new(*min, *max).slab(origin, dir)?;
                let (t, axis) = if t0 > RAY_EPS {
                    (t0, a0)
                } else if t1 > RAY_EPS {
                    (t1, a1)
                } else {
                    return None;
                };
                let mut n = Vector3::zeros();
                n[axis] = if dir[axis] > 0.0 { -1.0 } else { 1.0 };
                Some((t, n))
            }
            Primitive::Triangle { vertices: v, .. } => {
                // Moller-Trumbore, double sided.
                let e1 = v[1] - v[0];
                let e2 = v[2] - v[0];
                let p = dir.cross(&e2);
                let det = e1.dot(&p);
                if det.abs() < 1e-14 {
                    return None;
                }
                let inv = 1.0 / det;
                let s = origin - v[0];
                let u = s.dot(&p) * inv;
                if !(0.0..=1.0).contains(&u) {
                    return None;
                }
                let q = s.cross(&e1);
                let w = dir.dot(&q) * inv;
                if w < 0.0 || u + w > 1.0 {
                    return None;
                }
                let t = e2.dot(&q) * inv;
                if t <= RAY_EPS {
                    return None;
                }
                let mut n = e1.cross(&e2).normalize();
                if n.dot(dir) > 0.0 {
                    n = -n;
                }
                Some((t, n))
            }
        }
    }

    /// Whether the primitive meets the open interior of `cell`.
    pub fn overlaps_open_box(&self, cell: &Aabb) -> bool {
        match self {
            Primitive::Box { min, max, .. } => (0..3).all(|a| min[a] < cell.max[a] && max[a] > cell.min[a]),
            Primitive::Triangle { vertices, .. } => triangle_overlaps_open_box(vertices, cell),
        }
    }

    /// Uniform sample on the surface with its outward/geometric normal.
    fn sample_surface(&self, rng: &mut Rng) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Primitive::Box { min, max, .. } => {
                let e = max - min;
                let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let (u, w) = (rng.random::<f64>(), rng.random::<f64>());
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = Vector3::zeros();
                let mut n = Vector3::zeros();
                if face % 2 == 0 {
                    p[axis] = min[axis];
                    n[axis] = -1.0;
                } else {
                    p[axis] = max[axis];
                    n[axis] = 1.0;
                }
                p[a1] = min[a1] + u * e[a1];
                p[a2] = min[a2] + w * e[a2];
                (p, n)
            }
            Primitive::Triangle { vertices: v, .. } => {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let s = r1.sqrt();
                let p = v[0] * (1.0 - s) + v[1] * (s * (1.0 - r2)) + v[2] * (s * r2);
                let n = (v[1] - v[0]).cross(&(v[2] - v[0])).normalize();
                (p, n)
            }
        }
    }
}

fn in_unit_cube(v: &Vector3<f64>) -> bool {
    v.iter().all(|c| (0.0..=1.0).contains(c))
}

/// Separating-axis test against the open box: touching counts as separated.
fn triangle_overlaps_open_box(tri: &[Vector3<f64>; 3], cell: &Aabb) -> bool {
    let c = cell.center();
    let h = 0.5 * cell.extent();
    let v: Vec<Vector3<f64>> = tri.iter().map(|p| p - c).collect();
    let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    let separated = |axis: Vector3<f64>| -> bool {
        if axis.norm_squared() < 1e-24 {
            return false;
        }
        let p: Vec<f64> = v.iter().map(|x| x.dot(&axis)).collect();
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let r = h.x * axis.x.abs() + h.y * axis.y.abs() + h.z * axis.z.abs();
        lo >= r || hi <= -r
    };
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    if axes.iter().any(|a| separated(*a)) {
        return false;
    }
    if separated(e[0].cross(&e[1])) {
        return false;
    }
    for a in &axes {
        for ed in &e {
            if separated(a.cross(ed)) {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
}

impl GroundTruthScene {
    pub fn new(bounds: Aabb, primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self { bounds, primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| self.bounds.max[a] <= self.bounds.min[a]) {
            return Err(Error::InvalidScene("bounds must have positive extent".into()));
        }
        for p in &self.primitives {
            p.validate()?;
            let bb = p.aabb();
            if !self.bounds.contains(&bb.min, 1e-9) || !self.bounds.contains(&bb.max, 1e-9) {
                return Err(Error::InvalidScene(format!("primitive outside bounds: {p:?}")));
            }
        }
        if !self.has_free_region(0.2) {
            return Err(Error::InvalidScene(
                "scene needs a free region at least two voxels across".into(),
            ));
        }
        Ok(())
    }

    /// True when some free voxel has all six neighbors free as well.
    fn has_free_region(&self, voxel_size: f64) -> bool {
        let gt = VoxelMap::from_ground_truth(self, voxel_size);
        let d = gt.dims;
        (1..d[2].saturating_sub(1)).any(|z| {
            (1..d[1].saturating_sub(1)).any(|y| {
                (1..d[0].saturating_sub(1)).any(|x| {
                    gt.is_free([x, y, z])
                        && crate::voxel::NEIGHBORS_6.iter().all(|o| {
                            gt.is_free([
                                (x as i64 + o[0]) as usize,
                                (y as i64 + o[1]) as usize,
                                (z as i64 + o[2]) as usize,
                            ])
                        })
                })
            })
        })
    }

    /// Reads a scene document from disk, or builds `builtin:<name>`.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(name) = spec.strip_prefix("builtin:") {
            return match name {
                "room" => Ok(Self::builtin_room()),
                other => Err(Error::Config(format!("unknown builtin scene '{other}'"))),
            };
        }
        let text = std::fs::read_to_string(spec)?;
        let scene: Self = serde_json::from_str(&text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// A 4 x 4 x 2.5 m room with a handful of grid-aligned obstacles.
    pub fn builtin_room() -> Self {
        let v = Vector3::new;
        let (sx, sy, sz) = (4.0, 4.0, 2.5);
        let mut prims = Vec::new();
        let mut quad = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>, rgb: Vector3<f64>| {
            prims.push(Primitive::Triangle { vertices: [a, b, c], rgb });
            prims.push(Primitive::Triangle { vertices: [a, c, d], rgb });
        };
        // floor, ceiling, walls
        quad(v(0., 0., 0.), v(sx, 0., 0.), v(sx, sy, 0.), v(0., sy, 0.), v(0.55, 0.45, 0.35));
        quad(v(0., 0., sz), v(sx, 0., sz), v(sx, sy, sz), v(0., sy, sz), v(0.9, 0.9, 0.85));
        quad(v(0., 0., 0.), v(sx, 0., 0.), v(sx, 0., sz), v(0., 0., sz), v(0.75, 0.8, 0.6));
        quad(v(0., sy, 0.), v(sx, sy, 0.), v(sx, sy, sz), v(0., sy, sz), v(0.6, 0.7, 0.85));
        quad(v(0., 0., 0.), v(0., sy, 0.), v(0., sy, sz), v(0., 0., sz), v(0.85, 0.7, 0.6));
        quad(v(sx, 0., 0.), v(sx, sy, 0.), v(sx, sy, sz), v(sx, 0., sz), v(0.7, 0.65, 0.8));
        // posters, 1 cm off the walls
        quad(v(1.2, 0.01, 1.0), v(2.4, 0.01, 1.0), v(2.4, 0.01, 1.8), v(1.2, 0.01, 1.8), v(0.2, 0.3, 0.7));
        quad(v(3.99, 1.4, 0.8), v(3.99, 2.6, 0.8), v(3.99, 2.6, 1.6), v(3.99, 1.4, 1.6), v(0.8, 0.2, 0.25));
        let mut block = |min: Vector3<f64>, max: Vector3<f64>, rgb: Vector3<f64>| {
            prims.push(Primitive::Box { min, max, rgb });
        };
        block(v(0.6, 0.6, 0.0), v(1.4, 1.2, 0.8), v(0.8, 0.25, 0.2));
        block(v(2.6, 2.4, 0.0), v(3.4, 3.6, 1.6), v(0.2, 0.35, 0.75));
        block(v(1.8, 0.2, 0.0), v(2.2, 0.6, 1.2), v(0.25, 0.65, 0.3));
        block(v(0.2, 2.4, 1.0), v(0.6, 3.4, 1.2), v(0.9, 0.8, 0.2));
        block(v(2.6, 0.8, 0.0), v(3.0, 1.2, 0.4), v(0.5, 0.3, 0.6));
        Self {
            bounds: Aabb::new(Vector3::zeros(), v(sx, sy, sz)),
            primitives: prims,
        }
    }
}

/// Nearest intersection of the ray with any primitive.
pub fn ray_cast(scene: &GroundTruthScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some((t, n)) = p.intersect(origin, dir) {
            if best.is_none_or(|b| t < b.distance) {
                best = Some(Hit {
                    distance: t,
                    color: p.rgb(),
                    normal: n,
                    primitive: i,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub rgb: ImageBuf<Vector3<f64>>,
    /// Camera-frame depth in meters; `INVALID_DEPTH` where unknown.
    pub depth: ImageBuf<f64>,
    pub pose: Pose,
    pub frame_index: usize,
}

/// Simulated RGB-D capture. Depth noise is `N(0, (slope * d)^2)`; values that
/// leave the sensing range become invalid.
pub fn render_gt(
    scene: &GroundTruthScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    noise_sigma_slope: f64,
    rng: &mut Rng,
    frame_index: usize,
) -> RgbdFrame {
    let (w, h) = (intr.width(), intr.height());
    let base = rng::fork_seed(rng);
    let rot = pose.camera_to_world();
    let [near, far] = intr.depth_range;
    let rows: Vec<(Vec<Vector3<f64>>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_rng = rng::substream(base, y as u64);
            let mut rgb = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let ray = intr.pixel_ray(x, y);
                match ray_cast(scene, &pose.position, &(rot * ray)) {
                    Some(hit) => {
                        let exact = hit.distance * ray.z;
                        let mut d = exact;
                        if noise_sigma_slope > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut row_rng);
                            d += noise_sigma_slope * exact * z;
                        }
                        rgb.push(hit.color);
                        depth.push(if d >= near && d <= far { d } else { INVALID_DEPTH });
                    }
                    None => {
                        rgb.push(Vector3::zeros());
                        depth.push(INVALID_DEPTH);
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    RgbdFrame {
        rgb: ImageBuf::from_vec(w, h, rgb),
        depth: ImageBuf::from_vec(w, h, depth),
        pose: *pose,
        frame_index,
    }
}

/// Area-uniform samples over all primitive surfaces.
pub fn sample_surface_points(
    scene: &GroundTruthScene,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    if scene.primitives.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut cdf = Vec::with_capacity(scene.primitives.len());
    let mut acc = 0.0;
    for p in &scene.primitives {
        acc += p.area();
        cdf.push(acc);
    }
    Ok((0..n)
        .map(|_| {
            let r = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|c| *c <= r).min(cdf.len() - 1);
            scene.primitives[i].sample_surface(rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestViewConfig {
    /// Pitch band in degrees, sampled uniformly.
    pub pitch_band_deg: [f64; 2],
    pub with_replacement: bool,
}

impl Default for TestViewConfig {
    fn default() -> Self {
        Self {
            pitch_band_deg: [-30.0, 30.0],
            with_replacement: true,
        }
    }
}

/// Held-out evaluation viewpoints, uniform over the free voxels of
/// `free_space` (normally [`VoxelMap::from_ground_truth`]). Positions are
/// jittered within the central half of the chosen voxel.
pub fn sample_test_viewpoints(
    scene: &GroundTruthScene,
    free_space: &VoxelMap,
    n: usize,
    cfg: &TestViewConfig,
    rng: &mut Rng,
) -> Result<Vec<Pose>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let free: Vec<[usize; 3]> = free_space
        .free_indices()
        .into_iter()
        .filter(|idx| {
            let c = free_space.center(*idx);
            scene.bounds.contains(&c, 0.0)
        })
        .collect();
    if free.is_empty() {
        return Err(Error::NoFreeSpace);
    }
    let picks: Vec<usize> = if cfg.with_replacement {
        (0..n).map(|_| rng.random_range(0..free.len())).collect()
    } else {
        if n > free.len() {
            return Err(Error::NotEnoughFreeVoxels {
                requested: n,
                available: free.len(),
            });
        }
        rand::seq::index::sample(rng, free.len(), n).into_vec()
    };
    let half = 0.25 * free_space.voxel_size;
    let [plo, phi] = cfg.pitch_band_deg;
    Ok(picks
        .into_iter()
        .map(|i| {
            let c = free_space.center(free[i]);
            let jitter = Vector3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            );
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let pitch = if phi > plo {
                rng.random_range(plo..phi).to_radians()
            } else {
                plo.to_radians()
            };
            Pose::new(c + jitter, yaw, pitch)
        })
        .collect())
}
