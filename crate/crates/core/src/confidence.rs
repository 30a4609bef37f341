//! Per-surfel confidence from the viewpoints that observed it.
//!
//! A surfel seen from close range, head-on, and from widely spread directions
//! is well constrained. The score multiplies a distance-weighted cosine sum
//! `γ` by `exp(β)`, where `β = 1 - |mean view direction|` measures dispersion.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pose};
use crate::splat::{visible_surfels, SplatMap, Surfel};
use crate::voxel::{RoiKind, RoiVoxel, VoxelMap, VoxelState};

/// Viewpoints closer than this to a surfel center are ignored.
const COINCIDENT: f64 = 1e-9;
/// Low-confidence ROIs whose averaged normal is shorter than this are dropped.
const MIN_MEAN_NORMAL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceMode {
    Full,
    /// Observation count only, ignoring where the views were taken from.
    CountOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceConfig {
    pub mode: ConfidenceMode,
    pub d_far: f64,
    /// Observation count at which count-only confidence saturates at 1.
    pub n_sat: usize,
    /// Surfels below this confidence seed inspection ROIs.
    pub k_thresh: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            mode: ConfidenceMode::Full,
            d_far: 5.0,
            n_sat: 10,
            k_thresh: 0.5,
        }
    }
}

/// Every executed viewpoint, indexed by the order of capture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseHistory {
    poses: Vec<Pose>,
}

impl PoseHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pose and returns its index.
    pub fn push(&mut self, pose: Pose) -> usize {
        self.poses.push(pose);
        self.poses.len() - 1
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }
}

/// Sorted pose indices from which each surfel has been observed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationLog {
    pub sets: Vec<Vec<usize>>,
}

impl ObservationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Grows the log with empty sets for newly spawned surfels.
    pub fn resize(&mut self, n: usize) {
        self.sets.resize(n, Vec::new());
    }

    /// Compacts the log with the remap produced by pruning.
    pub fn remap(&mut self, remap: &[Option<usize>]) {
        let mut out = vec![Vec::new(); remap.iter().flatten().count()];
        for (old, new) in remap.iter().enumerate() {
            if let (Some(new), Some(set)) = (new, self.sets.get_mut(old)) {
                out[*new] = std::mem::take(set);
            }
        }
        self.sets = out;
    }

    fn insert(&mut self, surfel: usize, pose_index: usize) {
        let set = &mut self.sets[surfel];
        if let Err(pos) = set.binary_search(&pose_index) {
            set.insert(pos, pose_index);
        }
    }
}

/// Records `pose_index` for every surfel that reaches `w_min` from `pose`.
pub fn update_observations(
    log: &mut ObservationLog,
    map: &SplatMap,
    pose_index: usize,
    pose: &Pose,
    intr: &CameraIntrinsics,
    w_min: f64,
) {
    log.resize(map.len());
    for i in visible_surfels(map, pose, intr, w_min) {
        log.insert(i, pose_index);
    }
}

/// Distance-weighted cosine term `γ` and dispersion `β` of one surfel.
pub fn gamma_beta(surfel: &Surfel, observed: &[usize], history: &[Pose], d_far: f64) -> (f64, f64) {
    let n = surfel.normal();
    let mut gamma = 0.0;
    let mut sum_v = Vector3::zeros();
    let mut count = 0usize;
    for &j in observed {
        let offset = history[j].position - surfel.position;
        let d = offset.norm();
        if d < COINCIDENT {
            continue;
        }
        let v = offset / d;
        gamma += (1.0 - d / d_far).max(0.0) * n.dot(&v).max(0.0);
        sum_v += v;
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    // a single view gives |v| = 1 up to rounding
    let beta = (1.0 - (sum_v / count as f64).norm()).max(0.0);
    (gamma, beta)
}

pub fn confidence(surfel: &Surfel, observed: &[usize], history: &[Pose], d_far: f64) -> f64 {
    assert!(d_far > 0.0, "d_far must be positive");
    let (gamma, beta) = gamma_beta(surfel, observed, history, d_far);
    gamma * beta.exp()
}

pub fn confidence_count_only(observed: &[usize], n_sat: usize) -> f64 {
    (observed.len() as f64 / n_sat.max(1) as f64).clamp(0.0, 1.0)
}

/// Recomputes every surfel's confidence from scratch.
pub fn refresh_confidences(map: &mut SplatMap, log: &ObservationLog, history: &PoseHistory, cfg: &ConfidenceConfig) {
    assert!(log.len() >= map.len(), "observation log shorter than map");
    let poses = history.poses();
    map.surfels.par_iter_mut().zip(&log.sets).for_each(|(s, set)| {
        s.confidence = match cfg.mode {
            ConfidenceMode::Full => confidence(s, set, poses, cfg.d_far),
            ConfidenceMode::CountOnly => confidence_count_only(set, cfg.n_sat),
        };
    });
}

/// Occupied voxels holding surfels with confidence below `k_thresh`, ordered
/// by voxel index. The normal averages those surfels' normals after flipping
/// each into the hemisphere of the first one.
pub fn low_confidence_rois(map: &SplatMap, voxels: &VoxelMap, k_thresh: f64) -> Vec<RoiVoxel> {
    let mut groups: BTreeMap<usize, Vec<Vector3<f64>>> = BTreeMap::new();
    for s in &map.surfels {
        if s.confidence >= k_thresh {
            continue;
        }
        let Some(idx) = voxels.index_of(&s.position) else {
            continue;
        };
        if voxels.state(idx.map(|v| v as i64)).ok() != Some(VoxelState::Occupied) {
            continue;
        }
        groups.entry(voxels.linear(idx)).or_default().push(s.normal());
    }
    groups
        .into_iter()
        .filter_map(|(lin, normals)| {
            let first = normals[0];
            let sum: Vector3<f64> = normals.iter().map(|n| if n.dot(&first) < 0.0 { -n } else { *n }).sum();
            let mean = sum / normals.len() as f64;
            if mean.norm() < MIN_MEAN_NORMAL {
                return None;
            }
            let index = voxels.unlinear(lin);
            Some(RoiVoxel {
                index,
                center: voxels.center(index),
                normal: mean.normalize(),
                kind: RoiKind::LowConfidence,
                range_to_robot: 0.0,
            })
        })
        .collect()
}
