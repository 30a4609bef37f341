//! Coarse log-odds occupancy grid.
//!
//! A voxel is *unknown* until a measurement ray touches it; afterwards it is
//! *free* when its occupancy probability is below one half and *occupied*
//! otherwise. The grid also supplies frontiers, the free-voxel lattice used for
//! planning, and the census of unexplored voxels visible from a viewpoint.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::scene::{Aabb, GroundTruthScene, INVALID_DEPTH};

pub const NEIGHBORS_6: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogOddsParams {
    pub hit: f64,
    pub miss: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for LogOddsParams {
    fn default() -> Self {
        Self {
            hit: 0.85,
            miss: -0.4,
            min: -2.0,
            max: 3.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VoxelState {
    Unknown,
    Free,
    Occupied,
}

impl VoxelState {
    pub fn as_str(&self) -> &'static str {
        match self {
            VoxelState::Unknown => "unknown",
            VoxelState::Free => "free",
            VoxelState::Occupied => "occupied",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiKind {
    Frontier,
    LowConfidence,
}

/// Region of interest used to seed targeted candidate viewpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiVoxel {
    pub index: [usize; 3],
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub kind: RoiKind,
    pub range_to_robot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub params: LogOddsParams,
    log_odds: Vec<f64>,
    observed: Vec<bool>,
}

impl VoxelMap {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin,
            voxel_size,
            dims,
            params: LogOddsParams::default(),
            log_odds: vec![0.0; n],
            observed: vec![false; n],
        }
    }

    /// Smallest grid anchored at `bounds.min` that covers the bounds.
    pub fn for_bounds(bounds: &Aabb, voxel_size: f64) -> Self {
        let e = bounds.extent();
        let dims = [0, 1, 2].map(|a| ((e[a] / voxel_size) - 1e-9).ceil().max(1.0) as usize);
        Self::new(bounds.min, voxel_size, dims)
    }

    /// Fully observed map of the true occupancy: a voxel is occupied iff some
    /// primitive meets its open interior.
    pub fn from_ground_truth(scene: &GroundTruthScene, voxel_size: f64) -> Self {
        let mut map = Self::for_bounds(&scene.bounds, voxel_size);
        let boxes: Vec<Aabb> = scene.primitives.iter().map(|p| p.aabb()).collect();
        for lin in 0..map.len() {
            let idx = map.unlinear(lin);
            let cell = map.cell_aabb(idx);
            let occ = scene.primitives.iter().zip(&boxes).any(|(p, bb)| {
                (0..3).all(|a| bb.min[a] <= cell.max[a] && bb.max[a] >= cell.min[a]) && p.overlaps_open_box(&cell)
            });
            map.observed[lin] = true;
            map.log_odds[lin] = if occ { map.params.max } else { map.params.min };
        }
        map
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.log_odds.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.log_odds.is_empty()
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let x = lin % self.dims[0];
        let y = (lin / self.dims[0]) % self.dims[1];
        let z = lin / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn in_bounds(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    pub fn center(&self, idx: [usize; 3]) -> Vector3<f64> {
        self.origin
            + self.voxel_size
                * Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5)
    }

    pub fn cell_aabb(&self, idx: [usize; 3]) -> Aabb {
        let min = self.origin + self.voxel_size * Vector3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64);
        Aabb::new(min, min + Vector3::repeat(self.voxel_size))
    }

    #[inline]
    fn grid_coords(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.voxel_size
    }

    pub fn index_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let g = self.grid_coords(p);
        let i = [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64];
        self.in_bounds(i).then(|| [i[0] as usize, i[1] as usize, i[2] as usize])
    }

    /// Nearest voxel (clamped into the grid).
    pub fn nearest_index(&self, p: &Vector3<f64>) -> [usize; 3] {
        let g = self.grid_coords(p);
        [0, 1, 2].map(|a| (g[a].floor().max(0.0) as usize).min(self.dims[a] - 1))
    }

    pub fn log_odds(&self, idx: [usize; 3]) -> f64 {
        self.log_odds[self.linear(idx)]
    }

    pub fn is_observed(&self, idx: [usize; 3]) -> bool {
        self.observed[self.linear(idx)]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    pub fn observed_flags(&self) -> &[bool] {
        &self.observed
    }

    #[inline]
    fn state_linear(&self, lin: usize) -> VoxelState {
        if !self.observed[lin] {
            VoxelState::Unknown
        } else if self.log_odds[lin] < 0.0 {
            VoxelState::Free
        } else {
            VoxelState::Occupied
        }
    }

    /// Forces a voxel into `state` at the saturated log-odds of that state.
    pub fn set_state(&mut self, idx: [usize; 3], state: VoxelState) {
        let lin = self.linear(idx);
        let (observed, l) = match state {
            VoxelState::Unknown => (false, 0.0),
            VoxelState::Free => (true, self.params.min),
            VoxelState::Occupied => (true, self.params.max),
        };
        self.observed[lin] = observed;
        self.log_odds[lin] = l;
    }

    pub fn fill(&mut self, state: VoxelState) {
        for lin in 0..self.len() {
            self.set_state(self.unlinear(lin), state);
        }
    }

    pub fn state(&self, idx: [i64; 3]) -> Result<VoxelState> {
        if !self.in_bounds(idx) {
            return Err(Error::VoxelOutOfRange(idx[0], idx[1], idx[2]));
        }
        Ok(self.state_linear(self.linear([idx[0] as usize, idx[1] as usize, idx[2] as usize])))
    }

    /// `false` for out-of-range indices.
    pub fn is_free(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| idx[a] < self.dims[a]) && self.state_linear(self.linear(idx)) == VoxelState::Free
    }

    fn state_at(&self, idx: [i64; 3]) -> Option<VoxelState> {
        self.in_bounds(idx)
            .then(|| self.state_linear(self.linear([idx[0] as usize, idx[1] as usize, idx[2] as usize])))
    }

    fn update(&mut self, lin: usize, delta: f64) {
        let l = (self.log_odds[lin] + delta).clamp(self.params.min, self.params.max);
        self.log_odds[lin] = l;
        self.observed[lin] = true;
    }

    /// Applies one miss update to every listed voxel and one hit update to the
    /// endpoint voxel, as produced by [`Self::trace`].
    pub fn apply_ray(&mut self, misses: &[usize], hit: Option<usize>) {
        for &m in misses {
            self.update(m, self.params.miss);
        }
        if let Some(h) = hit {
            self.update(h, self.params.hit);
        }
    }

    /// Voxels crossed by the segment `from -> to` (3D DDA). Returns the crossed
    /// voxels before the endpoint, and the endpoint voxel if it lies in the map.
    pub fn trace(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> (Vec<usize>, Option<usize>) {
        let end = self.index_of(to).map(|i| self.linear(i));
        let g0 = self.grid_coords(from);
        let g1 = self.grid_coords(to);
        let dg = g1 - g0;
        let mut cell = [g0.x.floor() as i64, g0.y.floor() as i64, g0.z.floor() as i64];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            if dg[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((cell[a] + 1) as f64 - g0[a]) / dg[a];
                t_delta[a] = 1.0 / dg[a];
            } else if dg[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (cell[a] as f64 - g0[a]) / dg[a];
                t_delta[a] = -1.0 / dg[a];
            }
        }
        let mut misses = Vec::new();
        let mut entered = false;
        loop {
            if self.in_bounds(cell) {
                entered = true;
                let lin = self.linear([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
                if Some(lin) == end {
                    break;
                }
                misses.push(lin);
            } else if entered {
                break;
            }
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] > 1.0 {
                break;
            }
            cell[a] += step[a];
            t_max[a] += t_delta[a];
        }
        (misses, end)
    }

    /// Probabilistic update from one depth scan taken at `sensor_origin`.
    pub fn integrate_point_cloud(&mut self, sensor_origin: &Vector3<f64>, points: &[Vector3<f64>]) -> Result<()> {
        if self.index_of(sensor_origin).is_none() {
            return Err(Error::Config(format!(
                "sensor origin {:?} outside voxel map",
                sensor_origin.as_slice()
            )));
        }
        for p in points {
            let (misses, hit) = self.trace(sensor_origin, p);
            self.apply_ray(&misses, hit);
        }
        Ok(())
    }

    pub fn free_indices(&self) -> Vec<[usize; 3]> {
        (0..self.len())
            .filter(|&l| self.state_linear(l) == VoxelState::Free)
            .map(|l| self.unlinear(l))
            .collect()
    }

    /// Centers of all free voxels: the planning lattice.
    pub fn free_lattice(&self) -> Vec<Vector3<f64>> {
        self.free_indices().into_iter().map(|i| self.center(i)).collect()
    }

    /// Free voxels with at least one unknown 6-neighbor. The normal averages
    /// the unit offsets toward free 6-neighbors.
    pub fn frontiers(&self) -> Vec<RoiVoxel> {
        let mut out = Vec::new();
        for lin in 0..self.len() {
            if self.state_linear(lin) != VoxelState::Free {
                continue;
            }
            let idx = self.unlinear(lin);
            let mut toward_free = Vector3::zeros();
            let mut toward_unknown = Vector3::zeros();
            let mut any_unknown = false;
            for o in &NEIGHBORS_6 {
                let n = [idx[0] as i64 + o[0], idx[1] as i64 + o[1], idx[2] as i64 + o[2]];
                let dir = Vector3::new(o[0] as f64, o[1] as f64, o[2] as f64);
                match self.state_at(n) {
                    Some(VoxelState::Unknown) => {
                        any_unknown = true;
                        toward_unknown += dir;
                    }
                    Some(VoxelState::Free) => toward_free += dir,
                    _ => {}
                }
            }
            if !any_unknown {
                continue;
            }
            // Opposing free neighbors can cancel; fall back to facing away
            // from the unknown side, then to straight up.
            let normal = if toward_free.norm() > 1e-9 {
                toward_free.normalize()
            } else if toward_unknown.norm() > 1e-9 {
                -toward_unknown.normalize()
            } else {
                Vector3::z()
            };
            out.push(RoiVoxel {
                index: idx,
                center: self.center(idx),
                normal,
                kind: RoiKind::Frontier,
                range_to_robot: 0.0,
            });
        }
        out
    }

    /// Number of unknown voxels whose center projects into the image, lies in
    /// the sensing range, and is closer to the camera than the rendered depth
    /// at that pixel (invalid rendered depth counts as unbounded).
    pub fn count_unexplored_visible(&self, pose: &Pose, depth: &ImageBuf<f64>, intr: &CameraIntrinsics) -> usize {
        let Some((lo, hi)) = self.frustum_index_box(pose, intr) else {
            return 0;
        };
        let w2c = pose.world_to_camera();
        let [near, far] = intr.depth_range;
        let mut count = 0;
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let lin = self.linear([x, y, z]);
                    if self.observed[lin] {
                        continue;
                    }
                    let p = w2c * (self.center([x, y, z]) - pose.position);
                    if unexplored_visible(&p, depth, intr, near, far) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// Same census without frustum culling.
    pub fn count_unexplored_visible_full_scan(
        &self,
        pose: &Pose,
        depth: &ImageBuf<f64>,
        intr: &CameraIntrinsics,
    ) -> usize {
        let w2c = pose.world_to_camera();
        let [near, far] = intr.depth_range;
        (0..self.len())
            .filter(|&lin| !self.observed[lin])
            .filter(|&lin| {
                let p = w2c * (self.center(self.unlinear(lin)) - pose.position);
                unexplored_visible(&p, depth, intr, near, far)
            })
            .count()
    }

    /// Conservative voxel index range covering the view cone up to `d_far`.
    fn frustum_index_box(&self, pose: &Pose, intr: &CameraIntrinsics) -> Option<([usize; 3], [usize; 3])> {
        let c2w = pose.camera_to_world();
        let far = intr.far();
        let (w, h) = (intr.width() as f64, intr.height() as f64);
        let ray = |u: f64, v: f64| c2w * Vector3::new((u - intr.cx()) / intr.fx(), (v - intr.cy()) / intr.fy(), 1.0).normalize();
        let mut lo = pose.position;
        let mut hi = pose.position;
        const STEPS: usize = 32;
        for i in 0..=STEPS {
            let t = i as f64 / STEPS as f64;
            for (u, v) in [(t * w, 0.0), (t * w, h), (0.0, t * h), (w, t * h)] {
                let p = pose.position + far * ray(u, v);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        // A world axis inside the cone pulls that extreme out to the full range.
        let w2c = pose.world_to_camera();
        for a in 0..3 {
            for s in [1.0, -1.0] {
                let mut e = Vector3::zeros();
                e[a] = s;
                let pc = w2c * e;
                if pc.z > 0.0 {
                    let uv = intr.project(&pc);
                    if uv.x >= 0.0 && uv.x <= w && uv.y >= 0.0 && uv.y <= h {
                        let p = pose.position + far * e;
                        lo = lo.inf(&p);
                        hi = hi.sup(&p);
                    }
                }
            }
        }
        let pad = Vector3::repeat(self.voxel_size);
        let glo = self.grid_coords(&(lo - pad));
        let ghi = self.grid_coords(&(hi + pad));
        let mut a_lo = [0usize; 3];
        let mut a_hi = [0usize; 3];
        for a in 0..3 {
            let l = glo[a].floor().max(0.0);
            let u = ghi[a].floor().min(self.dims[a] as f64 - 1.0);
            if u < l {
                return None;
            }
            a_lo[a] = l as usize;
            a_hi[a] = u as usize;
        }
        Some((a_lo, a_hi))
    }

    /// One line per observed voxel: `i j k log_odds state`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# i j k log_odds state")?;
        for lin in 0..self.len() {
            if self.observed[lin] {
                let [i, j, k] = self.unlinear(lin);
                writeln!(f, "{i} {j} {k} {} {}", self.log_odds[lin], self.state_linear(lin).as_str())?;
            }
        }
        Ok(())
    }
}

#[inline]
fn unexplored_visible(p: &Vector3<f64>, depth: &ImageBuf<f64>, intr: &CameraIntrinsics, near: f64, far: f64) -> bool {
    let Some((px, py)) = intr.pixel_of(p) else {
        return false;
    };
    if p.z < near || p.z > far {
        return false;
    }
    let d = *depth.at(px, py);
    let rendered = if d == INVALID_DEPTH { f64::INFINITY } else { d };
    p.z < rendered
}
