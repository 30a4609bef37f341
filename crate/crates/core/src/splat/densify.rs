//! Densification mask, surfel spawning and visibility pruning.

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng as _;

use super::render::{RenderPass, RenderedViews};
use super::{quat_from_normal, SplatMap, Surfel};
use crate::camera::{CameraIntrinsics, Pose};
use crate::image::ImageBuf;
use crate::rng::Rng;
use crate::scene::{RgbdFrame, INVALID_DEPTH};

pub type DensifyMask = ImageBuf<bool>;

/// Thresholds of the densification predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyThresholds {
    pub opacity: f64,
    pub color: f64,
    pub lambda: f64,
}

impl Default for DensifyThresholds {
    fn default() -> Self {
        Self {
            opacity: 0.5,
            color: 0.5,
            lambda: 0.05,
        }
    }
}

/// Marks pixels where the map is thin, wrong in color, or where measured
/// geometry lies in front of the rendered surface.
pub fn densify_mask(rendered: &RenderedViews, frame: &RgbdFrame, th: &DensifyThresholds) -> DensifyMask {
    assert!(rendered.opacity.same_shape(&frame.depth), "render and frame shapes differ");
    let (w, h) = (frame.depth.width, frame.depth.height);
    let data = (0..w * h)
        .map(|i| {
            let low_opacity = rendered.opacity.data[i] < th.opacity;
            let diff = rendered.color.data[i] - frame.rgb.data[i];
            let color_err = diff.abs().sum() / 3.0 > th.color;
            let dm = frame.depth.data[i];
            let depth_err = dm != INVALID_DEPTH && rendered.depth.data[i] - dm > th.lambda * dm;
            low_opacity || color_err || depth_err
        })
        .collect();
    ImageBuf::from_vec(w, h, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnConfig {
    /// Pixel block edge; one masked pixel is drawn per block.
    pub stride: usize,
    pub max_new: usize,
    pub scale: f64,
    pub opacity: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            max_new: 4096,
            scale: 0.01,
            opacity: 0.5,
        }
    }
}

/// Unprojects masked pixels with valid depth into new surfels. `normals` are
/// camera-frame normals estimated from the measured depth; where one is zero
/// the surfel faces back along the pixel ray.
pub fn spawn(
    map: &mut SplatMap,
    frame: &RgbdFrame,
    mask: &DensifyMask,
    normals: &ImageBuf<Vector3<f64>>,
    intr: &CameraIntrinsics,
    cfg: &SpawnConfig,
    step: usize,
    rng: &mut Rng,
) -> usize {
    let (w, h) = (intr.width(), intr.height());
    let stride = cfg.stride.max(1);
    let mut picks = Vec::new();
    let mut cands = Vec::with_capacity(stride * stride);
    for by in (0..h).step_by(stride) {
        for bx in (0..w).step_by(stride) {
            cands.clear();
            for y in by..(by + stride).min(h) {
                for x in bx..(bx + stride).min(w) {
                    if *mask.at(x, y) && *frame.depth.at(x, y) != INVALID_DEPTH {
                        cands.push((x, y));
                    }
                }
            }
            if !cands.is_empty() {
                picks.push(cands[rng.random_range(0..cands.len())]);
            }
        }
    }
    if picks.len() > cfg.max_new {
        let mut keep = sample(rng, picks.len(), cfg.max_new).into_vec();
        keep.sort_unstable();
        picks = keep.into_iter().map(|i| picks[i]).collect();
    }
    let c2w = frame.pose.camera_to_world();
    for &(x, y) in &picks {
        let d = *frame.depth.at(x, y);
        let n_cam = *normals.at(x, y);
        let n = if n_cam.norm() > 0.0 { c2w * n_cam } else { -(c2w * intr.pixel_ray(x, y)) };
        let s = Surfel::new(
            frame.pose.position + c2w * intr.unproject(x, y, d),
            quat_from_normal(&n),
            Vector2::repeat(cfg.scale),
            *frame.rgb.at(x, y),
            cfg.opacity,
        );
        map.push(s, step);
    }
    picks.len()
}

/// Removes surfels that reach `w_min` in none of the `history` views.
pub fn prune_invisible(map: &mut SplatMap, history: &[Pose], intr: &CameraIntrinsics, w_min: f64) -> (usize, Vec<Option<usize>>) {
    let mut keep = vec![false; map.len()];
    for pose in history {
        let best = RenderPass::new(map, pose, intr).max_weights(map.len());
        for (k, w) in keep.iter_mut().zip(best) {
            *k |= w >= w_min;
        }
    }
    let removed = keep.iter().filter(|k| !**k).count();
    (removed, map.retain_mask(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::splat::render;

    fn frame(w: usize, depth: f64) -> RgbdFrame {
        RgbdFrame {
            rgb: ImageBuf::filled(w, w, Vector3::new(0.4, 0.5, 0.6)),
            depth: ImageBuf::filled(w, w, depth),
            pose: Pose::new(Vector3::new(1.0, 1.0, 1.0), 0.3, 0.1),
            frame_index: 0,
        }
    }

    #[test]
    fn spawn_at_principal_point_lands_on_optical_axis() {
        let intr = CameraIntrinsics::square(60.0, 9);
        let f = frame(9, 2.0);
        let mut mask = ImageBuf::filled(9, 9, false);
        *mask.at_mut(4, 4) = true;
        let normals = ImageBuf::filled(9, 9, Vector3::zeros());
        let mut map = SplatMap::new();
        let cfg = SpawnConfig::default();
        let n = spawn(&mut map, &f, &mask, &normals, &intr, &cfg, 3, &mut stream(1, "t"));
        assert_eq!(n, 1);
        let expect = f.pose.position + 2.0 * f.pose.forward();
        assert!((map.surfels[0].position - expect).norm() < 1e-12);
        assert_eq!(map.creation_step, vec![3]);
        assert_eq!(map.surfels[0].confidence, 0.0);
        assert_eq!(map.surfels[0].opacity, 0.5);
        // fallback normal faces the camera
        assert!(map.surfels[0].normal().dot(&f.pose.forward()).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn spawn_respects_cap_and_stride() {
        let intr = CameraIntrinsics::square(60.0, 16);
        let f = frame(16, 1.5);
        let mask = ImageBuf::filled(16, 16, true);
        let normals = ImageBuf::filled(16, 16, Vector3::new(0.0, 0.0, -1.0));
        let mut map = SplatMap::new();
        let mut cfg = SpawnConfig::default();
        assert_eq!(spawn(&mut map, &f, &mask, &normals, &intr, &cfg, 0, &mut stream(1, "t")), 64);
        cfg.max_new = 10;
        assert_eq!(spawn(&mut map, &f, &mask, &normals, &intr, &cfg, 0, &mut stream(1, "t")), 10);
        let empty = ImageBuf::filled(16, 16, false);
        assert_eq!(spawn(&mut map, &f, &empty, &normals, &intr, &cfg, 0, &mut stream(1, "t")), 0);
    }

    #[test]
    fn mask_ignores_invalid_measured_depth_in_depth_clause() {
        let intr = CameraIntrinsics::square(60.0, 8);
        let mut m = SplatMap::new();
        m.push(
            Surfel::new(
                Vector3::new(3.0, 1.0, 1.0),
                quat_from_normal(&Vector3::x()),
                Vector2::repeat(2.0),
                Vector3::new(0.4, 0.5, 0.6),
                0.9999,
            ),
            0,
        );
        let mut f = frame(8, INVALID_DEPTH);
        f.pose = Pose::new(Vector3::new(1.0, 1.0, 1.0), 0.0, 0.0);
        let r = render(&m, &f.pose, &intr, false);
        let mask = densify_mask(&r, &f, &DensifyThresholds::default());
        assert!(!*mask.at(4, 4));
        f.depth = ImageBuf::filled(8, 8, 1.0);
        let mask = densify_mask(&r, &f, &DensifyThresholds::default());
        assert!(*mask.at(4, 4));
    }

    #[test]
    fn prune_removes_out_of_view_surfels() {
        let intr = CameraIntrinsics::square(60.0, 16);
        let pose = Pose::new(Vector3::zeros(), 0.0, 0.0);
        let mut m = SplatMap::new();
        let q = quat_from_normal(&Vector3::x());
        m.push(Surfel::new(Vector3::new(2.0, 0.0, 0.0), q, Vector2::repeat(0.1), Vector3::zeros(), 0.8), 0);
        m.push(Surfel::new(Vector3::new(-2.0, 0.0, 0.0), q, Vector2::repeat(0.1), Vector3::zeros(), 0.8), 0);
        let (removed, remap) = prune_invisible(&mut m, &[pose], &intr, 0.3);
        assert_eq!(removed, 1);
        assert_eq!(remap, vec![Some(0), None]);
    }
}
