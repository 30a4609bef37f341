//! Reconstruction quality: PSNR on held-out views, completeness of the fused
//! rendered depth against ground-truth surface samples, and the explored share
//! of the voxels a robot could ever observe.

use std::collections::{HashMap, VecDeque};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pose};
use crate::image::ImageBuf;
use crate::scene::{render_gt, GroundTruthScene, RgbdFrame, INVALID_DEPTH};
use crate::splat::{render, SplatMap};
use crate::voxel::{VoxelMap, VoxelState, NEIGHBORS_6};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Pixel stride when backprojecting rendered depth.
pub const FUSION_STRIDE: usize = 2;

/// `10 log10(1 / MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &ImageBuf<Vector3<f64>>, gt: &ImageBuf<Vector3<f64>>) -> f64 {
    assert!(rendered.same_shape(gt), "image shapes differ");
    let se: f64 = rendered.data.iter().zip(&gt.data).map(|(a, b)| (a - b).norm_squared()).sum();
    let mse = se / (3 * rendered.len()) as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// World points of valid depth pixels, sampled every `stride` pixels.
pub fn backproject(depth: &ImageBuf<f64>, pose: &Pose, intr: &CameraIntrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..depth.height).step_by(stride) {
        for x in (0..depth.width).step_by(stride) {
            let d = *depth.at(x, y);
            if d != INVALID_DEPTH {
                out.push(pose.to_world(&intr.unproject(x, y, d)));
            }
        }
    }
    out
}

/// Rendered depth from every pose, fused into one world point cloud.
pub fn fuse_rendered_depth(map: &SplatMap, poses: &[Pose], intr: &CameraIntrinsics, stride: usize) -> Vec<Vector3<f64>> {
    if map.is_empty() {
        return Vec::new();
    }
    let clouds: Vec<Vec<Vector3<f64>>> = poses
        .par_iter()
        .map(|p| backproject(&render(map, p, intr, false).depth, p, intr, stride))
        .collect();
    clouds.concat()
}

/// Uniform spatial hash answering "is any point within `radius`" queries.
pub struct PointHash {
    cell: f64,
    radius: f64,
    buckets: HashMap<[i64; 3], Vec<Vector3<f64>>>,
}

impl PointHash {
    /// Cell edge equals `radius`, so the 27 surrounding cells cover the ball.
    pub fn new(points: &[Vector3<f64>], radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        let mut h = Self {
            cell: radius,
            radius,
            buckets: HashMap::new(),
        };
        for p in points {
            h.buckets.entry(h.key(p)).or_default().push(*p);
        }
        h
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.cell).floor() as i64)
    }

    pub fn any_within(&self, q: &Vector3<f64>) -> bool {
        let k = self.key(q);
        let r2 = self.radius * self.radius;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if b.iter().any(|p| (p - q).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Fraction of `gt_surface` points with a fused point within `threshold`.
pub fn completeness(fused: &[Vector3<f64>], gt_surface: &[Vector3<f64>], threshold: f64) -> f64 {
    if fused.is_empty() || gt_surface.is_empty() {
        return 0.0;
    }
    let hash = PointHash::new(fused, threshold);
    let hits = gt_surface.par_iter().filter(|p| hash.any_within(p)).count();
    hits as f64 / gt_surface.len() as f64
}

/// Completeness of the map's rendered depth fused over `poses`.
pub fn completeness_ratio(
    map: &SplatMap,
    poses: &[Pose],
    intr: &CameraIntrinsics,
    gt_surface: &[Vector3<f64>],
    threshold: f64,
) -> f64 {
    completeness(&fuse_rendered_depth(map, poses, intr, FUSION_STRIDE), gt_surface, threshold)
}

/// Voxels that measurements taken from the free space reachable from a start
/// position can touch: the reachable free voxels and the occupied voxels
/// face-adjacent to them.
#[derive(Debug, Clone)]
pub struct ExplorationCensus {
    attainable: Vec<bool>,
    count: usize,
}

impl ExplorationCensus {
    /// Flood fill over the ground-truth free voxels of `truth` from `start`.
    pub fn new(truth: &VoxelMap, start: [usize; 3]) -> Self {
        let mut attainable = vec![false; truth.len()];
        let mut seen = vec![false; truth.len()];
        let mut queue = VecDeque::new();
        if truth.is_free(start) {
            seen[truth.linear(start)] = true;
            queue.push_back(start);
        }
        while let Some(c) = queue.pop_front() {
            attainable[truth.linear(c)] = true;
            for o in &NEIGHBORS_6 {
                let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
                if !truth.in_bounds(n) {
                    continue;
                }
                let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                let lin = truth.linear(n);
                match truth.state(n.map(|v| v as i64)) {
                    Ok(VoxelState::Free) if !seen[lin] => {
                        seen[lin] = true;
                        queue.push_back(n);
                    }
                    Ok(VoxelState::Occupied) => attainable[lin] = true,
                    _ => {}
                }
            }
        }
        let count = attainable.iter().filter(|a| **a).count();
        Self { attainable, count }
    }

    pub fn attainable_count(&self) -> usize {
        self.count
    }

    /// Share of attainable voxels that `map` has observed.
    pub fn explored_fraction(&self, map: &VoxelMap) -> f64 {
        assert_eq!(map.len(), self.attainable.len(), "voxel grids differ");
        if self.count == 0 {
            return 0.0;
        }
        let seen = map
            .observed_flags()
            .iter()
            .zip(&self.attainable)
            .filter(|(o, a)| **o && **a)
            .count();
        seen as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub step: usize,
    pub sim_time: f64,
    pub psnr_mean: f64,
    pub completeness: f64,
    pub surfel_count: usize,
    pub explored_frac: f64,
}

/// Held-out views and ground truth fixed at mission start.
pub struct Evaluator {
    pub test_poses: Vec<Pose>,
    /// Noise-free captures at the test poses.
    pub gt_frames: Vec<RgbdFrame>,
    pub gt_surface: Vec<Vector3<f64>>,
    pub threshold: f64,
    pub intr: CameraIntrinsics,
}

impl Evaluator {
    pub fn new(
        scene: &GroundTruthScene,
        test_poses: Vec<Pose>,
        gt_surface: Vec<Vector3<f64>>,
        threshold: f64,
        intr: CameraIntrinsics,
    ) -> Self {
        let mut unused = crate::rng::stream(0, "noiseless");
        let gt_frames = test_poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_gt(scene, p, &intr, 0.0, &mut unused, i))
            .collect();
        Self {
            test_poses,
            gt_frames,
            gt_surface,
            threshold,
            intr,
        }
    }

    pub fn mean_psnr(&self, map: &SplatMap) -> f64 {
        if self.gt_frames.is_empty() {
            return 0.0;
        }
        let values: Vec<f64> = self
            .gt_frames
            .par_iter()
            .map(|f| psnr(&render(map, &f.pose, &self.intr, false).color, &f.rgb))
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// PSNR and completeness of `map`; completeness fuses depth rendered at
    /// the measurement poses.
    pub fn evaluate(&self, map: &SplatMap, measurement_poses: &[Pose]) -> (f64, f64) {
        let c = completeness_ratio(map, measurement_poses, &self.intr, &self.gt_surface, self.threshold);
        (self.mean_psnr(map), c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn img(v: f64) -> ImageBuf<Vector3<f64>> {
        ImageBuf::filled(4, 4, Vector3::repeat(v))
    }

    #[test]
    fn psnr_direct_values() {
        assert_eq!(psnr(&img(0.3), &img(0.3)), PSNR_CAP);
        assert!((psnr(&img(0.6), &img(0.5)) - 20.0).abs() < 1e-9);
        assert!(psnr(&img(0.7), &img(0.5)) < psnr(&img(0.6), &img(0.5)));
    }

    #[test]
    fn completeness_trivial_cases() {
        let gt: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        assert_eq!(completeness(&[], &gt, 0.02), 0.0);
        assert_eq!(completeness(&gt, &gt, 0.02), 1.0);
        let half: Vec<_> = gt.iter().step_by(2).copied().collect();
        assert!((completeness(&half, &gt, 0.02) - 0.5).abs() < 1e-12);
        let intr = CameraIntrinsics::square(60.0, 8);
        assert_eq!(completeness_ratio(&SplatMap::new(), &[Pose::new(Vector3::zeros(), 0.0, 0.0)], &intr, &gt, 0.02), 0.0);
    }

    #[test]
    fn backprojection_inverts_projection() {
        let intr = CameraIntrinsics::square(60.0, 8);
        let pose = Pose::new(Vector3::new(1.0, 2.0, 0.5), 0.7, -0.2);
        let mut d = ImageBuf::filled(8, 8, 2.0);
        *d.at_mut(0, 0) = INVALID_DEPTH;
        let pts = backproject(&d, &pose, &intr, 2);
        assert_eq!(pts.len(), 15);
        for p in pts {
            let c = pose.to_camera(&p);
            assert!((c.z - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn census_of_a_walled_corridor() {
        let mut truth = VoxelMap::new(Vector3::zeros(), 0.2, [5, 3, 1]);
        truth.fill(VoxelState::Occupied);
        for x in 0..4 {
            truth.set_state([x, 1, 0], VoxelState::Free);
        }
        // an isolated pocket that cannot be reached
        truth.set_state([4, 0, 0], VoxelState::Free);
        let census = ExplorationCensus::new(&truth, [0, 1, 0]);
        // 4 free plus 4 + 4 side walls plus the end wall at x = 4
        assert_eq!(census.attainable_count(), 13);
        let mut seen = VoxelMap::new(Vector3::zeros(), 0.2, [5, 3, 1]);
        assert_eq!(census.explored_fraction(&seen), 0.0);
        seen.set_state([0, 1, 0], VoxelState::Free);
        seen.set_state([4, 0, 0], VoxelState::Free);
        assert!((census.explored_fraction(&seen) - 1.0 / 13.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hash_matches_all_pairs(seed in 0u64..500, n in 1usize..200, m in 1usize..200) {
            let mut rng = stream(seed, "nn");
            let mut pts = |k: usize| -> Vec<Vector3<f64>> {
                (0..k).map(|_| Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect()
            };
            let fused = pts(n);
            let gt = pts(m);
            let hash = PointHash::new(&fused, 0.02);
            for q in &gt {
                let brute = fused.iter().any(|p| (p - q).norm() <= 0.02);
                prop_assert_eq!(hash.any_within(q), brute);
            }
        }

        #[test]
        fn completeness_monotone_in_fused_set(seed in 0u64..500) {
            let mut rng = stream(seed, "mono");
            let mut pts = |k: usize| -> Vec<Vector3<f64>> {
                (0..k).map(|_| Vector3::new(rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), 0.0)).collect()
            };
            let gt = pts(100);
            let mut fused = pts(20);
            let before = completeness(&fused, &gt, 0.02);
            fused.extend(pts(20));
            prop_assert!(completeness(&fused, &gt, 0.02) >= before);
        }
    }
}
