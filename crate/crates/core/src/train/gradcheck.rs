//! Central finite-difference check of the analytic gradients.
//!
//! The loss is piecewise smooth: contributor sets change at the 3σ cutoff and
//! the early-stop threshold, depth validity flips at the opacity floor, L1
//! terms kink at zero and surfel normals flip orientation when the camera
//! crosses their plane. A coordinate whose difference stencil crosses such a
//! boundary is excluded, detected by comparing a structural signature at the
//! two stencil ends with the one at the base point.

use nalgebra::{Quaternion, Vector2, Vector3};
use rand::Rng as _;

use super::backward::{gradients, PARAMS_PER_SURFEL};
use super::loss::{loss, sign0, LossWeights};
use super::normals::depth_normals;
use crate::camera::{CameraIntrinsics, Pose};
use crate::image::ImageBuf;
use crate::rng::{stream, Rng};
use crate::scene::{RgbdFrame, INVALID_DEPTH};
use crate::splat::{RenderPass, SplatMap, Surfel};

pub const PARAM_NAMES: [&str; PARAMS_PER_SURFEL] = [
    "x0", "x1", "x2", "qw", "qx", "qy", "qz", "sx", "sy", "r", "g", "b", "o",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub scenes: usize,
    pub surfels: usize,
    pub resolution: usize,
    pub h: f64,
    pub rel_tol: f64,
    /// Coordinates with smaller analytic and numeric gradients are skipped.
    pub min_grad: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            surfels: 5,
            resolution: 8,
            h: 1e-4,
            rel_tol: 1e-3,
            min_grad: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckFailure {
    pub scene: usize,
    pub surfel: usize,
    pub param: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates skipped because the stencil crossed a structural boundary.
    pub excluded: usize,
    /// Coordinates below `min_grad`.
    pub negligible: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn excluded_fraction(&self) -> f64 {
        let total = self.checked + self.excluded + self.negligible;
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }

    fn merge(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.negligible += other.negligible;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// Discrete state that the loss is smooth within.
pub fn structure_signature(map: &SplatMap, frame: &RgbdFrame, intr: &CameraIntrinsics) -> Vec<i64> {
    let pass = RenderPass::new(map, &frame.pose, intr);
    let r = pass.composite(false);
    let (w, h) = (intr.width(), intr.height());
    let mut sig = Vec::new();
    for p in &pass.projected {
        sig.push(p.index as i64);
        sig.push(p.flip as i64);
        sig.push(p.clamped[0] as i64 + 2 * p.clamped[1] as i64);
    }
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            sig.push(-1);
            pass.walk_pixel(x, y, |c| {
                let fallback = pass.surfel_depth(c.slot, pix).1;
                sig.push(2 * pass.projected[c.slot].index as i64 + fallback as i64);
            });
            let diff = r.color.data[pix] - frame.rgb.data[pix];
            sig.extend(diff.iter().map(|d| sign0(*d) as i64));
            let dr = r.depth.data[pix];
            let dm = frame.depth.data[pix];
            sig.push((dr != INVALID_DEPTH) as i64);
            if dr != INVALID_DEPTH && dm != INVALID_DEPTH {
                sig.push(sign0(dr - dm) as i64);
            }
            sig.push((r.normal.data[pix].norm() > 0.0) as i64);
        }
    }
    let dn = depth_normals(&r.depth, intr);
    sig.extend(dn.sign.iter().map(|s| *s as i64));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            for j in [i + 1, i + w] {
                let d = r.normal.data[i] - r.normal.data[j];
                sig.extend(d.iter().map(|v| sign0(*v) as i64));
            }
        }
    }
    sig
}

fn get(s: &Surfel, k: usize) -> f64 {
    match k {
        0..=2 => s.position[k],
        3 => s.rotation.w,
        4 => s.rotation.i,
        5 => s.rotation.j,
        6 => s.rotation.k,
        7 | 8 => s.scale[k - 7],
        9..=11 => s.color[k - 9],
        _ => s.opacity,
    }
}

fn set(s: &mut Surfel, k: usize, v: f64) {
    match k {
        0..=2 => s.position[k] = v,
        3 => s.rotation.w = v,
        4 => s.rotation.i = v,
        5 => s.rotation.j = v,
        6 => s.rotation.k = v,
        7 | 8 => s.scale[k - 7] = v,
        9..=11 => s.color[k - 9] = v,
        _ => s.opacity = v,
    }
}

/// Checks every parameter of every surfel of one scene.
pub fn check_scene(
    map: &SplatMap,
    frame: &RgbdFrame,
    intr: &CameraIntrinsics,
    weights: &LossWeights,
    cfg: &GradcheckConfig,
    scene: usize,
) -> GradcheckReport {
    let (_, analytic) = gradients(map, frame, intr, weights);
    let base_sig = structure_signature(map, frame, intr);
    let mut report = GradcheckReport::default();
    let mut probe = map.clone();
    for i in 0..map.len() {
        let a = analytic[i].to_array();
        for (k, &ak) in a.iter().enumerate() {
            let v = get(&map.surfels[i], k);
            set(&mut probe.surfels[i], k, v + cfg.h);
            let lp = loss(
                &crate::splat::render(&probe, &frame.pose, intr, false),
                frame,
                weights,
                intr,
            )
            .total;
            let sp = structure_signature(&probe, frame, intr);
            set(&mut probe.surfels[i], k, v - cfg.h);
            let lm = loss(
                &crate::splat::render(&probe, &frame.pose, intr, false),
                frame,
                weights,
                intr,
            )
            .total;
            let sm = structure_signature(&probe, frame, intr);
            set(&mut probe.surfels[i], k, v);
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.h);
            if ak.abs() <= cfg.min_grad && numeric.abs() <= cfg.min_grad {
                report.negligible += 1;
                continue;
            }
            report.checked += 1;
            let rel_err = (ak - numeric).abs() / ak.abs().max(numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err > cfg.rel_tol {
                report.failures.push(GradcheckFailure {
                    scene,
                    surfel: i,
                    param: PARAM_NAMES[k],
                    analytic: ak,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    report
}

/// Random surfels in front of a camera at the origin looking along +x, and
/// a target frame with random colors, a tilted plane for depth and a few
/// invalid depth pixels.
pub fn random_case(
    rng: &mut Rng,
    surfels: usize,
    resolution: usize,
) -> (SplatMap, RgbdFrame, CameraIntrinsics) {
    let intr = CameraIntrinsics::square(60.0, resolution);
    let pose = Pose::new(Vector3::zeros(), 0.0, 0.0);
    let mut map = SplatMap::new();
    for _ in 0..surfels {
        let depth = rng.random_range(1.2..2.5);
        let lateral = 0.4 * depth * (30f64).to_radians().tan();
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let q = if q.norm() < 0.2 {
            Quaternion::identity()
        } else {
            q / q.norm()
        };
        let s = Surfel::new(
            Vector3::new(
                depth,
                rng.random_range(-lateral..lateral),
                rng.random_range(-lateral..lateral),
            ),
            q,
            Vector2::new(rng.random_range(0.15..0.45), rng.random_range(0.15..0.45)),
            Vector3::new(
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ),
            rng.random_range(0.2..0.9),
        );
        map.push(s, 0);
    }
    let c2w = pose.camera_to_world();
    let plane_n = Vector3::new(
        -1.0,
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    )
    .normalize();
    let offset = rng.random_range(1.5..2.5);
    let n = intr.pixel_count();
    let rgb = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            )
        })
        .collect();
    let depth = intr
        .pixel_rays()
        .iter()
        .map(|r| {
            if rng.random::<f64>() < 0.1 {
                return INVALID_DEPTH;
            }
            let ray = c2w * r;
            -offset / plane_n.dot(&ray)
        })
        .collect();
    let frame = RgbdFrame {
        rgb: ImageBuf::from_vec(resolution, resolution, rgb),
        depth: ImageBuf::from_vec(resolution, resolution, depth),
        pose,
        frame_index: 0,
    };
    (map, frame, intr)
}

/// Runs the full suite of random scenes.
pub fn run(cfg: &GradcheckConfig, weights: &LossWeights) -> GradcheckReport {
    let mut rng = stream(cfg.seed, "gradcheck");
    let mut report = GradcheckReport::default();
    for scene in 0..cfg.scenes {
        let (map, frame, intr) = random_case(&mut rng, cfg.surfels, cfg.resolution);
        report.merge(check_scene(&map, &frame, &intr, weights, cfg, scene));
    }
    report
}
