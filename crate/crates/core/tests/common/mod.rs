//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;

use surfelnbv::scene::{ray_cast, INVALID_DEPTH};
use surfelnbv::splat::{BLUR, GUARD_BAND, HIT_RADIUS, MIN_DEPTH_OPACITY, MIN_TRANSMITTANCE, PARALLEL_EPS, TRUNCATION_M2};
use surfelnbv::{CameraIntrinsics, GroundTruthScene, Pose, SplatMap, Surfel, VoxelMap, VoxelState};

/// Per-pixel channels of the naive renderer.
#[derive(Debug, Clone, Default)]
pub struct NaivePixel {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub opacity: f64,
    pub confidence: f64,
}

struct Footprint {
    surfel: Surfel,
    cam_z: f64,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    normal: Vector3<f64>,
}

/// Projects every surfel with its own EWA covariance and then, pixel by
/// pixel, walks the full depth-sorted list front to back.
pub fn naive_render(map: &SplatMap, pose: &Pose, intr: &CameraIntrinsics) -> Vec<NaivePixel> {
    let (fx, fy) = (intr.fx(), intr.fy());
    let w2c = pose.world_to_camera();
    let mut prints: Vec<Footprint> = Vec::new();
    for s in &map.surfels {
        let c = pose.to_camera(&s.position);
        if c.z <= 0.5 * intr.near() {
            continue;
        }
        let r = UnitQuaternion::from_quaternion(s.rotation).to_rotation_matrix().into_inner();
        let t_u = r.column(0) * s.scale.x;
        let t_v = r.column(1) * s.scale.y;
        let cov3 = t_u * t_u.transpose() + t_v * t_v.transpose();
        // footprint slopes limited to the guard band around the image
        let sx = (c.x / c.z).clamp(-GUARD_BAND * intr.cx() / fx, GUARD_BAND * intr.cx() / fx);
        let sy = (c.y / c.z).clamp(-GUARD_BAND * intr.cy() / fy, GUARD_BAND * intr.cy() / fy);
        let j = Matrix2x3::new(fx / c.z, 0.0, -fx * sx / c.z, 0.0, fy / c.z, -fy * sy / c.z);
        let cov = j * (w2c * cov3 * w2c.transpose()) * j.transpose() + Matrix2::identity() * BLUR;
        let Some(conic) = cov.try_inverse() else { continue };
        let mut n = r.column(2).into_owned();
        if n.dot(&(s.position - pose.position)) > 0.0 {
            n = -n;
        }
        prints.push(Footprint {
            surfel: *s,
            cam_z: c.z,
            mean: Vector2::new(fx * c.x / c.z + intr.cx(), fy * c.y / c.z + intr.cy()),
            conic,
            normal: n,
        });
    }
    prints.sort_by(|a, b| a.cam_z.total_cmp(&b.cam_z));
    let c2w = pose.camera_to_world();
    let mut out = Vec::with_capacity(intr.pixel_count());
    for y in 0..intr.height() {
        for x in 0..intr.width() {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let ray_cam = intr.pixel_ray(x, y);
            let ray = c2w * ray_cam;
            let mut p = NaivePixel::default();
            let mut t = 1.0;
            for f in &prints {
                let d = px - f.mean;
                let m2 = (d.transpose() * f.conic * d)[0];
                if m2 > TRUNCATION_M2 {
                    continue;
                }
                let alpha = f.surfel.opacity * (-0.5 * m2).exp();
                if alpha <= 0.0 {
                    continue;
                }
                if t < MIN_TRANSMITTANCE {
                    break;
                }
                let w = alpha * t;
                p.color += w * f.surfel.color;
                p.normal += w * f.normal;
                p.opacity += w;
                p.confidence += w * f.surfel.confidence;
                p.depth += w * plane_depth(&f.surfel, &f.normal, f.cam_z, pose, &ray, ray_cam.z);
                t *= 1.0 - alpha;
            }
            if p.opacity < MIN_DEPTH_OPACITY {
                p.depth = INVALID_DEPTH;
            }
            out.push(p);
        }
    }
    out
}

fn plane_depth(s: &Surfel, n: &Vector3<f64>, cam_z: f64, pose: &Pose, ray: &Vector3<f64>, ray_z: f64) -> f64 {
    let denom = n.dot(ray);
    if denom.abs() < PARALLEL_EPS {
        return cam_z;
    }
    let t = n.dot(&(s.position - pose.position)) / denom;
    if t <= 0.0 {
        return cam_z;
    }
    let hit = pose.position + t * ray;
    if (hit - s.position).norm() > HIT_RADIUS * s.scale.x.max(s.scale.y) {
        return cam_z;
    }
    t * ray_z
}

/// Random map of up to `max_surfels` surfels placed inside the view of `pose`.
pub fn random_view_map(pose: &Pose, intr: &CameraIntrinsics, max_surfels: usize, rng: &mut impl Rng) -> SplatMap {
    let n = rng.random_range(1..=max_surfels);
    let half = (0.5 * intr.fov_deg[0]).to_radians().tan();
    let mut map = SplatMap::new();
    for _ in 0..n {
        let z = rng.random_range(1.0..4.0);
        let c = Vector3::new(rng.random_range(-half..half) * z, rng.random_range(-half..half) * z, z);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0));
        map.surfels.push(Surfel {
            position: pose.to_world(&c),
            rotation: *q.quaternion(),
            scale: Vector2::new(rng.random_range(0.05..0.6), rng.random_range(0.05..0.6)),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            opacity: rng.random_range(0.05..0.99),
            confidence: rng.random(),
        });
    }
    map
}

/// Unknown voxels whose centers are in range, project into the image, and
/// sit in front of the first scene surface along their pixel's ray.
pub fn visible_unknown_by_ray_cast(voxels: &VoxelMap, scene: &GroundTruthScene, pose: &Pose, intr: &CameraIntrinsics) -> usize {
    let c2w = pose.camera_to_world();
    let [near, far] = intr.depth_range;
    let mut count = 0;
    for lin in 0..voxels.len() {
        let idx = voxels.unlinear(lin);
        if voxels.is_observed(idx) {
            continue;
        }
        let p = pose.to_camera(&voxels.center(idx));
        if p.z <= 0.0 || p.z < near || p.z > far {
            continue;
        }
        let u = intr.fx() * p.x / p.z + intr.cx();
        let v = intr.fy() * p.y / p.z + intr.cy();
        if u < 0.0 || v < 0.0 || u >= intr.width() as f64 || v >= intr.height() as f64 {
            continue;
        }
        let (px, py) = (u.floor() as usize, v.floor() as usize);
        let ray = intr.pixel_ray(px, py);
        let surface_z = match ray_cast(scene, &pose.position, &(c2w * ray)) {
            Some(hit) if (near..=far).contains(&(hit.distance * ray.z)) => hit.distance * ray.z,
            _ => f64::INFINITY,
        };
        if p.z < surface_z {
            count += 1;
        }
    }
    count
}

/// Hop-count BFS over free 6-neighbors; returns the path length in meters.
pub fn dijkstra_length(voxels: &VoxelMap, start: [usize; 3], goal: [usize; 3]) -> Option<f64> {
    let mut dist = vec![usize::MAX; voxels.len()];
    let mut queue = VecDeque::new();
    dist[voxels.linear(start)] = 0;
    queue.push_back(start);
    while let Some(c) = queue.pop_front() {
        let dc = dist[voxels.linear(c)];
        if c == goal {
            // sum edge by edge, matching how a path cost accumulates
            return Some((0..dc).fold(0.0, |acc, _| acc + voxels.voxel_size));
        }
        for axis in 0..3 {
            for step in [-1i64, 1] {
                let mut n = [c[0] as i64, c[1] as i64, c[2] as i64];
                n[axis] += step;
                if !voxels.in_bounds(n) {
                    continue;
                }
                let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                let nl = voxels.linear(n);
                if dist[nl] == usize::MAX && voxels.is_free(n) {
                    dist[nl] = dc + 1;
                    queue.push_back(n);
                }
            }
        }
    }
    None
}

/// Free voxels with at least one unknown face neighbor inside the grid.
pub fn brute_force_frontiers(voxels: &VoxelMap) -> BTreeSet<[usize; 3]> {
    let d = voxels.dims;
    let mut out = BTreeSet::new();
    for z in 0..d[2] as i64 {
        for y in 0..d[1] as i64 {
            for x in 0..d[0] as i64 {
                if voxels.state([x, y, z]).unwrap() != VoxelState::Free {
                    continue;
                }
                let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                let unknown_neighbor = offsets
                    .iter()
                    .any(|o| voxels.state([x + o[0], y + o[1], z + o[2]]).ok() == Some(VoxelState::Unknown));
                if unknown_neighbor {
                    out.insert([x as usize, y as usize, z as usize]);
                }
            }
        }
    }
    out
}

/// Travel-aware score recomputed from scratch, returning the
/// first index of the maximum.
pub fn exhaustive_winner(utilities: &[f64], lengths: &[f64], delta: f64) -> usize {
    let low = utilities.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let shifted: Vec<f64> = utilities.iter().map(|u| u - low).collect();
    let su: f64 = shifted.iter().sum();
    let sl: f64 = lengths.iter().sum();
    let score = |i: usize| {
        let g = if su > 0.0 { shifted[i] / su } else { 0.0 };
        let c = if sl > 0.0 { lengths[i] / sl } else { 0.0 };
        g - delta * c
    };
    let mut best = 0;
    for i in 1..utilities.len() {
        if score(i) > score(best) {
            best = i;
        }
    }
    best
}

/// Random grid with obstacles, free elsewhere.
pub fn random_obstacle_grid(dims: [usize; 3], p_obstacle: f64, rng: &mut impl Rng) -> VoxelMap {
    let mut v = VoxelMap::new(Vector3::zeros(), 0.2, dims);
    v.fill(VoxelState::Free);
    for lin in 0..v.len() {
        if rng.random_bool(p_obstacle) {
            v.set_state(v.unlinear(lin), VoxelState::Occupied);
        }
    }
    v
}

/// World-frame rotation with its third column along `n`.
pub fn frame_from_normal(n: &Vector3<f64>) -> Matrix3<f64> {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    Matrix3::from_columns(&[u, n.cross(&u), n])
}
