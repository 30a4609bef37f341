//! Next-best-view planning.
//!
//! Candidates come from two sources: uniform draws from the free lattice near
//! the robot, and cone samples around regions of interest (frontier voxels and
//! voxels holding low-confidence surfels). Each reachable candidate is scored
//! by its normalized utility minus a weighted, normalized A* path length.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;
use rand::Rng as _;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::splat::{render, SplatMap};
use crate::voxel::{RoiKind, RoiVoxel, VoxelMap, VoxelState, NEIGHBORS_6};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerMode {
    Full,
    /// Random candidates only.
    NoRoi,
    /// Frontier ROIs only and no confidence term in the utility.
    Fbe,
    /// Same planner as `Full`; the mission switches confidence to counts.
    CountOnly,
}

impl PlannerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerMode::Full => "full",
            PlannerMode::NoRoi => "no_roi",
            PlannerMode::Fbe => "fbe",
            PlannerMode::CountOnly => "count_only",
        }
    }
}

impl std::str::FromStr for PlannerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PlannerMode::Full),
            "no_roi" => Ok(PlannerMode::NoRoi),
            "fbe" => Ok(PlannerMode::Fbe),
            "count_only" => Ok(PlannerMode::CountOnly),
            other => Err(Error::Config(format!("unknown planner mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for PlannerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub max_angle_deg: f64,
    pub samples_per_roi: usize,
}

impl Default for ConeConfig {
    fn default() -> Self {
        Self {
            d_min: 0.5,
            d_max: 2.0,
            max_angle_deg: 45.0,
            samples_per_roi: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    /// Exploration weight.
    pub phi: f64,
    /// Travel-cost weight.
    pub delta: f64,
    pub n_total: usize,
    pub n_roi_max: usize,
    /// Radius around the robot for random candidates, meters.
    pub random_range: f64,
    /// Pitch band of random candidates, degrees.
    pub random_pitch_deg: f64,
    pub cone: ConeConfig,
    pub mode: PlannerMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            phi: 1000.0,
            delta: 0.5,
            n_total: 100,
            n_roi_max: 30,
            random_range: 0.5,
            random_pitch_deg: 45.0,
            cone: ConeConfig::default(),
            mode: PlannerMode::Full,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_roi_max > self.n_total {
            return Err(Error::Config("n_roi_max exceeds n_total".into()));
        }
        if !(self.cone.d_min < self.cone.d_max) {
            return Err(Error::Config("cone d_min must be below d_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OriginKind {
    Random,
    RoiFrontier,
    RoiLowConf,
}

impl OriginKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OriginKind::Random => "random",
            OriginKind::RoiFrontier => "roi_frontier",
            OriginKind::RoiLowConf => "roi_low_conf",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Utility {
    /// Fraction of all voxels that are unknown and visible.
    pub u_v: f64,
    /// Negative mean rendered confidence.
    pub u_g: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateViewpoint {
    pub pose: Pose,
    pub cell: [usize; 3],
    pub origin: OriginKind,
    pub utility: Utility,
    /// Lattice cells from the current cell to `cell`, both included.
    pub path: Vec<[usize; 3]>,
    pub path_length: f64,
}

impl CandidateViewpoint {
    fn new(pose: Pose, cell: [usize; 3], origin: OriginKind) -> Self {
        Self {
            pose,
            cell,
            origin,
            utility: Utility::default(),
            path: Vec::new(),
            path_length: 0.0,
        }
    }
}

/// Random candidates on free lattice cells within `cfg.random_range` of the
/// robot. When no cell is in range, the `n` nearest cells are used instead.
pub fn sample_random(current: &Pose, voxels: &VoxelMap, n: usize, cfg: &PlannerConfig, rng: &mut Rng) -> Result<Vec<CandidateViewpoint>> {
    let lattice = voxels.free_indices();
    if lattice.is_empty() {
        return Err(Error::EmptyLattice);
    }
    let dist = |c: &[usize; 3]| (voxels.center(*c) - current.position).norm();
    let mut pool: Vec<[usize; 3]> = lattice.iter().copied().filter(|c| dist(c) <= cfg.random_range).collect();
    if pool.is_empty() {
        let mut by_dist: Vec<(f64, [usize; 3])> = lattice.iter().map(|c| (dist(c), *c)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pool = by_dist.into_iter().take(n.max(1)).map(|(_, c)| c).collect();
    }
    let pitch = cfg.random_pitch_deg.to_radians();
    Ok((0..n)
        .map(|_| {
            let cell = pool[rng.random_range(0..pool.len())];
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let pitch = if pitch > 0.0 { rng.random_range(-pitch..=pitch) } else { 0.0 };
            CandidateViewpoint::new(Pose::new(voxels.center(cell), yaw, pitch), cell, OriginKind::Random)
        })
        .collect())
}

/// Uniform sample from the spherical-shell sector around `normal`.
fn cone_point(center: &Vector3<f64>, normal: &Vector3<f64>, cone: &ConeConfig, rng: &mut Rng) -> Vector3<f64> {
    let (lo3, hi3) = (cone.d_min.powi(3), cone.d_max.powi(3));
    let r = (lo3 + rng.random::<f64>() * (hi3 - lo3)).cbrt();
    let cos_max = cone.max_angle_deg.to_radians().cos();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    center + r * (cos_t * n + sin_t * (phi.cos() * u + phi.sin() * v))
}

/// Cone samples around ROIs taken nearest-first, snapped to free lattice
/// cells and aimed at the ROI center, until `cfg.n_roi_max` are collected.
pub fn sample_roi(rois: &[RoiVoxel], voxels: &VoxelMap, cfg: &PlannerConfig, rng: &mut Rng) -> Vec<CandidateViewpoint> {
    let mut out: Vec<CandidateViewpoint> = Vec::new();
    let mut taken = std::collections::HashSet::new();
    for roi in rois {
        if out.len() >= cfg.n_roi_max {
            break;
        }
        let origin = match roi.kind {
            RoiKind::Frontier => OriginKind::RoiFrontier,
            RoiKind::LowConfidence => OriginKind::RoiLowConf,
        };
        for _ in 0..cfg.cone.samples_per_roi {
            let p = cone_point(&roi.center, &roi.normal, &cfg.cone, rng);
            let Some(cell) = voxels.index_of(&p) else {
                continue;
            };
            if !voxels.is_free(cell) || !taken.insert(cell) {
                continue;
            }
            let pose = Pose::look_at(voxels.center(cell), roi.center);
            out.push(CandidateViewpoint::new(pose, cell, origin));
            if out.len() >= cfg.n_roi_max {
                break;
            }
        }
    }
    out
}

/// Exploration and confidence utility of viewing from `pose`.
pub fn utility(pose: &Pose, voxels: &VoxelMap, map: &SplatMap, intr: &CameraIntrinsics, cfg: &PlannerConfig) -> Utility {
    let r = render(map, pose, intr, false);
    let n_u = voxels.count_unexplored_visible(pose, &r.depth, intr);
    let u_v = n_u as f64 / voxels.len() as f64;
    let u_g = if cfg.mode == PlannerMode::Fbe {
        0.0
    } else {
        -r.confidence.data.iter().sum::<f64>() / r.confidence.len() as f64
    };
    Utility {
        u_v,
        u_g,
        total: cfg.phi * u_v + u_g,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cells: Vec<[usize; 3]>,
    pub length: f64,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    lin: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // min-heap on f, then on linear index for determinism
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.lin.cmp(&self.lin))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest 6-connected path through free voxels with a Euclidean heuristic.
/// `Ok(None)` when the goal is unreachable.
pub fn astar(voxels: &VoxelMap, start: [usize; 3], goal: [usize; 3]) -> Result<Option<Path>> {
    for c in [start, goal] {
        if !voxels.is_free(c) {
            return Err(Error::NotFree(c[0], c[1], c[2]));
        }
    }
    let s = voxels.voxel_size;
    let h = |c: [usize; 3]| {
        let d = Vector3::new(
            c[0] as f64 - goal[0] as f64,
            c[1] as f64 - goal[1] as f64,
            c[2] as f64 - goal[2] as f64,
        );
        d.norm() * s
    };
    let start_lin = voxels.linear(start);
    let goal_lin = voxels.linear(goal);
    let mut g = vec![f64::INFINITY; voxels.len()];
    let mut parent = vec![usize::MAX; voxels.len()];
    let mut closed = vec![false; voxels.len()];
    let mut open = BinaryHeap::new();
    g[start_lin] = 0.0;
    open.push(Open {
        f: h(start),
        g: 0.0,
        lin: start_lin,
    });
    while let Some(Open { g: gc, lin, .. }) = open.pop() {
        if closed[lin] {
            continue;
        }
        closed[lin] = true;
        if lin == goal_lin {
            let mut cells = vec![voxels.unlinear(lin)];
            let mut cur = lin;
            while cur != start_lin {
                cur = parent[cur];
                cells.push(voxels.unlinear(cur));
            }
            cells.reverse();
            return Ok(Some(Path { cells, length: gc }));
        }
        let c = voxels.unlinear(lin);
        for o in &NEIGHBORS_6 {
            let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            if !voxels.in_bounds(n) {
                continue;
            }
            let n = [n[0] as usize, n[1] as usize, n[2] as usize];
            let nl = voxels.linear(n);
            if closed[nl] || !voxels.is_free(n) {
                continue;
            }
            let ng = gc + s;
            if ng < g[nl] {
                g[nl] = ng;
                parent[nl] = lin;
                open.push(Open { f: ng + h(n), g: ng, lin: nl });
            }
        }
    }
    Ok(None)
}

/// Travel-aware scores of all candidates. Utilities are shifted so the
/// smallest is not negative before normalizing; a zero normalizer zeroes its
/// term.
pub fn scores(utilities: &[f64], lengths: &[f64], delta: f64) -> Vec<f64> {
    assert_eq!(utilities.len(), lengths.len());
    let shift = utilities.iter().copied().fold(0.0f64, f64::min);
    let u_sum: f64 = utilities.iter().map(|u| u - shift).sum();
    let l_sum: f64 = lengths.iter().sum();
    utilities
        .iter()
        .zip(lengths)
        .map(|(u, l)| {
            let gain = if u_sum > 0.0 { (u - shift) / u_sum } else { 0.0 };
            let cost = if l_sum > 0.0 { l / l_sum } else { 0.0 };
            gain - delta * cost
        })
        .collect()
}

/// Index of the best-scoring candidate, lowest index on ties.
pub fn select(utilities: &[f64], lengths: &[f64], delta: f64) -> Result<(usize, Vec<f64>)> {
    if utilities.is_empty() {
        return Err(Error::NoCandidates);
    }
    let s = scores(utilities, lengths, delta);
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    Ok((best, s))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanDiagnostics {
    pub sampled_random: usize,
    pub sampled_frontier: usize,
    pub sampled_low_conf: usize,
    pub reachable: usize,
    pub winner_score: f64,
}

/// Samples, filters, scores and selects the next viewpoint. `low_conf` holds
/// the low-confidence ROIs of the current map.
pub fn plan(
    current: &Pose,
    voxels: &VoxelMap,
    map: &SplatMap,
    low_conf: &[RoiVoxel],
    intr: &CameraIntrinsics,
    cfg: &PlannerConfig,
    rng: &mut Rng,
) -> Result<(CandidateViewpoint, PlanDiagnostics)> {
    let start = voxels
        .index_of(&current.position)
        .ok_or_else(|| Error::Config("robot outside voxel map".into()))?;
    // Hits on a surface right next to the robot can mark its own cell
    // occupied; the robot stands there, so plan as if it were free.
    let patched;
    let voxels = if voxels.is_free(start) {
        voxels
    } else {
        let mut v = voxels.clone();
        v.set_state(start, VoxelState::Free);
        patched = v;
        &patched
    };
    let mut rois: Vec<RoiVoxel> = match cfg.mode {
        PlannerMode::NoRoi => Vec::new(),
        PlannerMode::Fbe => voxels.frontiers(),
        PlannerMode::Full | PlannerMode::CountOnly => {
            let mut r = voxels.frontiers();
            r.extend_from_slice(low_conf);
            r
        }
    };
    for r in rois.iter_mut() {
        r.range_to_robot = (r.center - current.position).norm();
    }
    rois.sort_by(|a, b| a.range_to_robot.total_cmp(&b.range_to_robot).then(a.index.cmp(&b.index)));
    let mut cands = sample_roi(&rois, voxels, cfg, rng);
    let n_random = cfg.n_total.saturating_sub(cands.len());
    cands.extend(sample_random(current, voxels, n_random, cfg, rng)?);

    let mut diag = PlanDiagnostics::default();
    for c in &cands {
        match c.origin {
            OriginKind::Random => diag.sampled_random += 1,
            OriginKind::RoiFrontier => diag.sampled_frontier += 1,
            OriginKind::RoiLowConf => diag.sampled_low_conf += 1,
        }
    }

    let routed: Vec<Option<CandidateViewpoint>> = cands
        .into_par_iter()
        .map(|mut c| {
            let path = astar(voxels, start, c.cell).ok().flatten()?;
            c.path = path.cells;
            c.path_length = path.length;
            c.utility = utility(&c.pose, voxels, map, intr, cfg);
            Some(c)
        })
        .collect();
    let reachable: Vec<CandidateViewpoint> = routed.into_iter().flatten().collect();
    diag.reachable = reachable.len();
    let utilities: Vec<f64> = reachable.iter().map(|c| c.utility.total).collect();
    let lengths: Vec<f64> = reachable.iter().map(|c| c.path_length).collect();
    let (best, s) = select(&utilities, &lengths, cfg.delta)?;
    diag.winner_score = s[best];
    Ok((reachable[best].clone(), diag))
}
