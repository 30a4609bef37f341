//! Forward rasterizer.
//!
//! Surfels are projected with the EWA approximation (`J W Σ Wᵀ Jᵀ` plus a
//! small screen-space blur), sorted front-to-back by the camera-frame depth of
//! their centers, and alpha-composited per pixel. Channels are opacity-weighted
//! sums and are not normalized by the accumulated opacity.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{SplatMap, Surfel};
use crate::camera::{CameraIntrinsics, Pose};
use crate::image::ImageBuf;
use crate::scene::INVALID_DEPTH;

/// Screen-space blur added to the projected covariance (pixels²).
pub const BLUR: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a footprint is zero (3σ).
pub const TRUNCATION_M2: f64 = 9.0;
/// Compositing stops once the remaining transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Pixels with less accumulated opacity carry no depth.
pub const MIN_DEPTH_OPACITY: f64 = 1e-3;
/// `|n·r|` below which a pixel ray counts as parallel to the surfel plane.
pub const PARALLEL_EPS: f64 = 1e-6;
/// Ray/plane hits farther than this many in-plane scales from the center fall
/// back to the center depth.
pub const HIT_RADIUS: f64 = 3.0;
/// The footprint Jacobian is evaluated no farther out than this multiple of
/// the half-image tangent; surfels beside the camera would otherwise smear
/// across the whole frame.
pub const GUARD_BAND: f64 = 1.3;

const TILE: usize = 8;

/// Screen-space footprint of one surfel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectedSurfel {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Center in camera coordinates.
    pub cam: Vector3<f64>,
    /// Footprint Jacobian, evaluated at `jac_at`.
    pub jac: Matrix2x3<f64>,
    /// `cam` with `x/z` and `y/z` clamped to the guard band.
    pub jac_at: Vector3<f64>,
    pub clamped: [bool; 2],
    pub cov_cam: Matrix3<f64>,
    /// World-frame normal oriented toward the camera.
    pub normal: Vector3<f64>,
    /// `+1` or `-1`: orientation applied to the raw rotation column.
    pub flip: f64,
    /// `n·(x - C)` with the oriented normal.
    pub plane_offset: f64,
    /// `x - C` in world coordinates.
    pub to_center: Vector3<f64>,
    /// Largest in-plane scale; bounds how far a ray/plane hit may land from the center.
    pub max_extent: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub confidence: f64,
    /// Inclusive pixel range `[x0, x1, y0, y1]` covering the 3σ ellipse.
    pub bbox: [usize; 4],
}

/// Perspective Jacobian of the pixel projection at camera-frame point `p`.
pub(crate) fn projection_jacobian(p: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz * iz, 0.0, fy * iz, -fy * p.y * iz * iz)
}

/// `p` with its image-plane slopes clamped to the guard band, and which of
/// the two were clamped.
pub(crate) fn guard_band_point(p: &Vector3<f64>, intr: &CameraIntrinsics) -> (Vector3<f64>, [bool; 2]) {
    let lim = [GUARD_BAND * intr.cx() / intr.fx(), GUARD_BAND * intr.cy() / intr.fy()];
    let mut q = *p;
    let mut clamped = [false; 2];
    for a in 0..2 {
        let t = p[a] / p.z;
        if t.abs() > lim[a] {
            q[a] = lim[a].copysign(t) * p.z;
            clamped[a] = true;
        }
    }
    (q, clamped)
}

fn project_full(index: usize, s: &Surfel, pose: &Pose, w2c: &Matrix3<f64>, intr: &CameraIntrinsics) -> Option<ProjectedSurfel> {
    let cam = w2c * (s.position - pose.position);
    if cam.z <= 0.5 * intr.near() {
        return None;
    }
    let (fx, fy) = (intr.fx(), intr.fy());
    let mean = Vector2::new(fx * cam.x / cam.z + intr.cx(), fy * cam.y / cam.z + intr.cy());
    let (jac_at, clamped) = guard_band_point(&cam, intr);
    let jac = projection_jacobian(&jac_at, fx, fy);
    let rot = s.rotation_matrix();
    let cov_world = {
        let m = Matrix3::from_columns(&[rot.column(0) * s.scale.x, rot.column(1) * s.scale.y, Vector3::zeros()]);
        m * m.transpose()
    };
    let cov_cam = w2c * cov_world * w2c.transpose();
    let mut cov = jac * cov_cam * jac.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += BLUR;
    cov[(1, 1)] += BLUR;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(0, 1)], cov[(0, 0)]) / det;
    let half_tr = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
    let r = TRUNCATION_M2.sqrt() * lambda_max.sqrt();
    let (w, h) = (intr.width() as f64, intr.height() as f64);
    // pixel centers sit at integer + 0.5; one pixel of slack on each side
    let x0 = (mean.x - r - 0.5).floor() - 1.0;
    let x1 = (mean.x + r - 0.5).ceil() + 1.0;
    let y0 = (mean.y - r - 0.5).floor() - 1.0;
    let y1 = (mean.y + r - 0.5).ceil() + 1.0;
    if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 {
        return None;
    }
    let bbox = [
        x0.max(0.0) as usize,
        x1.min(w - 1.0) as usize,
        y0.max(0.0) as usize,
        y1.min(h - 1.0) as usize,
    ];
    let raw_n = rot.column(2).into_owned();
    let to_center = s.position - pose.position;
    let flip = if raw_n.dot(&to_center) > 0.0 { -1.0 } else { 1.0 };
    let normal = raw_n * flip;
    Some(ProjectedSurfel {
        index,
        mean,
        cov,
        conic,
        cam,
        jac,
        jac_at,
        clamped,
        cov_cam,
        normal,
        flip,
        plane_offset: normal.dot(&to_center),
        to_center,
        max_extent: s.scale.x.max(s.scale.y),
        opacity: s.opacity,
        color: s.color,
        confidence: s.confidence,
        bbox,
    })
}

/// Projected center and covariance; `None` when the center is not in front of
/// the camera (closer than half the near plane) or the footprint is off-image.
pub fn project(surfel: &Surfel, pose: &Pose, intr: &CameraIntrinsics) -> Option<Projection> {
    project_full(0, surfel, pose, &pose.world_to_camera(), intr).map(|p| Projection {
        mean: p.mean,
        cov: p.cov,
    })
}

/// Per-pixel outputs of one rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedViews {
    pub color: ImageBuf<Vector3<f64>>,
    /// Opacity-weighted camera-z depth; `INVALID_DEPTH` where opacity is tiny.
    pub depth: ImageBuf<f64>,
    /// Opacity-weighted world-frame normals.
    pub normal: ImageBuf<Vector3<f64>>,
    pub opacity: ImageBuf<f64>,
    pub confidence: ImageBuf<f64>,
    /// `(surfel index, w_i)` per pixel in compositing order.
    pub contributors: Option<Vec<Vec<(usize, f64)>>>,
}

impl RenderedViews {
    pub fn width(&self) -> usize {
        self.opacity.width
    }

    pub fn height(&self) -> usize {
        self.opacity.height
    }
}

/// One compositing step at a pixel.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    /// Index into [`RenderPass::projected`].
    pub slot: usize,
    pub alpha: f64,
    /// Transmittance before this surfel.
    pub transmittance: f64,
    /// Pixel center minus projected mean.
    pub delta: Vector2<f64>,
}

/// Projection, sorting and tile binning for one view; compositing can then be
/// replayed per pixel by the forward and backward passes.
pub struct RenderPass {
    pub pose: Pose,
    pub intr: CameraIntrinsics,
    pub projected: Vec<ProjectedSurfel>,
    /// World-frame unit ray per pixel, row-major.
    pub rays: Vec<Vector3<f64>>,
    /// Camera-frame z component of each unit ray.
    pub ray_z: Vec<f64>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl RenderPass {
    pub fn new(map: &SplatMap, pose: &Pose, intr: &CameraIntrinsics) -> Self {
        let w2c = pose.world_to_camera();
        let mut projected: Vec<ProjectedSurfel> = map
            .surfels
            .par_iter()
            .enumerate()
            .filter_map(|(i, s)| project_full(i, s, pose, &w2c, intr))
            .collect();
        projected.sort_by(|a, b| {
            a.cam
                .z
                .total_cmp(&b.cam.z)
                .then_with(|| {
                    let (pa, pb) = (&map.surfels[a.index].position, &map.surfels[b.index].position);
                    pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y)).then(pa.z.total_cmp(&pb.z))
                })
                .then(a.index.cmp(&b.index))
        });
        let (w, h) = (intr.width(), intr.height());
        let tiles_x = w.div_ceil(TILE);
        let tiles_y = h.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, p) in projected.iter().enumerate() {
            let [x0, x1, y0, y1] = p.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(slot as u32);
                }
            }
        }
        let c2w = pose.camera_to_world();
        let cam_rays = intr.pixel_rays();
        let ray_z = cam_rays.iter().map(|r| r.z).collect();
        let rays = cam_rays.into_iter().map(|r| c2w * r).collect();
        Self {
            pose: *pose,
            intr: *intr,
            projected,
            rays,
            ray_z,
            tiles,
            tiles_x,
        }
    }

    /// Replays front-to-back compositing at pixel `(x, y)`, calling `f` for
    /// each surfel that contributes.
    #[inline]
    pub fn walk_pixel(&self, x: usize, y: usize, mut f: impl FnMut(&Contribution)) {
        let pc = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        for &slot in &self.tiles[(y / TILE) * self.tiles_x + x / TILE] {
            let p = &self.projected[slot as usize];
            let [x0, x1, y0, y1] = p.bbox;
            if x < x0 || x > x1 || y < y0 || y > y1 {
                continue;
            }
            let delta = pc - p.mean;
            let m2 = delta.dot(&(p.conic * delta));
            if m2 > TRUNCATION_M2 {
                continue;
            }
            let alpha = p.opacity * (-0.5 * m2).exp();
            if alpha <= 0.0 {
                continue;
            }
            if t < MIN_TRANSMITTANCE {
                break;
            }
            f(&Contribution {
                slot: slot as usize,
                alpha,
                transmittance: t,
                delta,
            });
            t *= 1.0 - alpha;
        }
    }

    /// Camera-z depth of the ray/surfel-plane intersection for pixel `pix`;
    /// the flag is set when the center-depth fallback was used.
    #[inline]
    pub fn surfel_depth(&self, slot: usize, pix: usize) -> (f64, bool) {
        let p = &self.projected[slot];
        let nr = p.normal.dot(&self.rays[pix]);
        if nr.abs() < PARALLEL_EPS {
            return (p.cam.z, true);
        }
        let t = p.plane_offset / nr;
        if t <= 0.0 {
            return (p.cam.z, true);
        }
        // the screen-space blur lets grazing surfels cover pixels whose rays
        // meet the plane far outside the disk; use the center depth there
        let miss = (self.rays[pix] * t - p.to_center).norm();
        if miss > HIT_RADIUS * p.max_extent {
            (p.cam.z, true)
        } else {
            (t * self.ray_z[pix], false)
        }
    }

    pub fn composite(&self, with_contributors: bool) -> RenderedViews {
        let (w, h) = (self.intr.width(), self.intr.height());
        type Row = (Vec<Vector3<f64>>, Vec<f64>, Vec<Vector3<f64>>, Vec<f64>, Vec<f64>, Vec<Vec<(usize, f64)>>);
        let rows: Vec<Row> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row: Row = (
                    Vec::with_capacity(w),
                    Vec::with_capacity(w),
                    Vec::with_capacity(w),
                    Vec::with_capacity(w),
                    Vec::with_capacity(w),
                    Vec::new(),
                );
                for x in 0..w {
                    let pix = y * w + x;
                    let mut c = Vector3::zeros();
                    let mut d = 0.0;
                    let mut n = Vector3::zeros();
                    let mut o = 0.0;
                    let mut k = 0.0;
                    let mut list = Vec::new();
                    self.walk_pixel(x, y, |ct| {
                        let p = &self.projected[ct.slot];
                        let wt = ct.transmittance * ct.alpha;
                        c += wt * p.color;
                        d += wt * self.surfel_depth(ct.slot, pix).0;
                        n += wt * p.normal;
                        o += wt;
                        k += wt * p.confidence;
                        if with_contributors {
                            list.push((p.index, wt));
                        }
                    });
                    row.0.push(c);
                    row.1.push(if o < MIN_DEPTH_OPACITY { INVALID_DEPTH } else { d });
                    row.2.push(n);
                    row.3.push(o);
                    row.4.push(k);
                    if with_contributors {
                        row.5.push(list);
                    }
                }
                row
            })
            .collect();
        let mut out = RenderedViews {
            color: ImageBuf::filled(w, h, Vector3::zeros()),
            depth: ImageBuf::filled(w, h, 0.0),
            normal: ImageBuf::filled(w, h, Vector3::zeros()),
            opacity: ImageBuf::filled(w, h, 0.0),
            confidence: ImageBuf::filled(w, h, 0.0),
            contributors: with_contributors.then(|| Vec::with_capacity(w * h)),
        };
        for (y, row) in rows.into_iter().enumerate() {
            out.color.data[y * w..(y + 1) * w].copy_from_slice(&row.0);
            out.depth.data[y * w..(y + 1) * w].copy_from_slice(&row.1);
            out.normal.data[y * w..(y + 1) * w].copy_from_slice(&row.2);
            out.opacity.data[y * w..(y + 1) * w].copy_from_slice(&row.3);
            out.confidence.data[y * w..(y + 1) * w].copy_from_slice(&row.4);
            if let Some(c) = out.contributors.as_mut() {
                c.extend(row.5);
            }
        }
        out
    }

    /// Largest per-pixel contribution `w_i` of every surfel (indexed by surfel).
    pub fn max_weights(&self, n_surfels: usize) -> Vec<f64> {
        let mut best = vec![0.0f64; n_surfels];
        let w = self.intr.width();
        for y in 0..self.intr.height() {
            for x in 0..w {
                self.walk_pixel(x, y, |ct| {
                    let i = self.projected[ct.slot].index;
                    let wt = ct.transmittance * ct.alpha;
                    if wt > best[i] {
                        best[i] = wt;
                    }
                });
            }
        }
        best
    }
}

/// Renders color, depth, normal, opacity and confidence at `pose`.
pub fn render(map: &SplatMap, pose: &Pose, intr: &CameraIntrinsics, with_contributors: bool) -> RenderedViews {
    RenderPass::new(map, pose, intr).composite(with_contributors)
}

/// Indices of surfels whose largest per-pixel contribution reaches `w_min`.
pub fn visible_surfels(map: &SplatMap, pose: &Pose, intr: &CameraIntrinsics, w_min: f64) -> Vec<usize> {
    RenderPass::new(map, pose, intr)
        .max_weights(map.len())
        .iter()
        .enumerate()
        .filter(|(_, w)| **w >= w_min)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Quaternion;

    fn facing_surfel(pos: Vector3<f64>, s: f64, o: f64) -> Surfel {
        // identity rotation: normal along world z
        Surfel::new(pos, Quaternion::identity(), Vector2::new(s, s), Vector3::new(0.2, 0.5, 0.9), o)
    }

    /// Camera at the origin looking down world +z... via pitch = +90°.
    fn up_pose() -> Pose {
        Pose::new(Vector3::zeros(), 0.0, std::f64::consts::FRAC_PI_2)
    }

    #[test]
    fn on_axis_projection_matches_scaled_isotropic_covariance() {
        let intr = CameraIntrinsics::square(60.0, 65);
        let (a, z) = (0.05, 2.0);
        let s = facing_surfel(Vector3::new(0.0, 0.0, z), a, 0.8);
        let p = project(&s, &up_pose(), &intr).unwrap();
        let f = intr.fx();
        let expect = (f * a / z).powi(2) + BLUR;
        assert!((p.cov[(0, 0)] - expect).abs() < 1e-9);
        assert!((p.cov[(1, 1)] - expect).abs() < 1e-9);
        assert!(p.cov[(0, 1)].abs() < 1e-9);
        assert!((p.mean - Vector2::new(intr.cx(), intr.cy())).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_is_skipped() {
        let intr = CameraIntrinsics::square(60.0, 16);
        let s = facing_surfel(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.8);
        assert!(project(&s, &up_pose(), &intr).is_none());
        let mut m = SplatMap::new();
        m.push(s, 0);
        assert!(visible_surfels(&m, &up_pose(), &intr, 0.3).is_empty());
    }

    #[test]
    fn single_surfel_center_pixel() {
        let intr = CameraIntrinsics::square(60.0, 33);
        let s = facing_surfel(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.8);
        let mut m = SplatMap::new();
        m.push(s, 0);
        let v = render(&m, &up_pose(), &intr, true);
        let (cx, cy) = (16, 16);
        assert!((v.opacity.at(cx, cy) - 0.8).abs() < 1e-12);
        assert!((v.color.at(cx, cy) - 0.8 * s.color).norm() < 1e-12);
        assert!((v.depth.at(cx, cy) - 0.8 * 2.0).abs() < 1e-12);
        assert_eq!(visible_surfels(&m, &up_pose(), &intr, 0.3), vec![0]);
    }

    #[test]
    fn opaque_surfel_depth_is_exact_plane_distance() {
        let intr = CameraIntrinsics::square(60.0, 33);
        let q = super::super::quat_from_normal(&Vector3::new(0.3, -0.2, 1.0));
        let s = Surfel::new(Vector3::new(0.0, 0.0, 2.0), q, Vector2::new(0.2, 0.3), Vector3::repeat(0.5), 1.0);
        let mut m = SplatMap::new();
        m.push(s, 0);
        let pose = up_pose();
        let v = render(&m, &pose, &intr, false);
        let ray_cam = intr.pixel_ray(16, 16);
        let ray = pose.camera_to_world() * ray_cam;
        let n = s.normal();
        let t = n.dot(&s.position) / n.dot(&ray);
        assert!((v.depth.at(16, 16) - t * ray_cam.z).abs() < 1e-9);
    }

    #[test]
    fn two_half_alphas_compose_to_three_quarters() {
        let intr = CameraIntrinsics::square(60.0, 33);
        let mut m = SplatMap::new();
        m.push(facing_surfel(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5), 0);
        m.push(facing_surfel(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5), 0);
        let v = render(&m, &up_pose(), &intr, true);
        assert!((v.opacity.at(16, 16) - 0.75).abs() < 1e-12);
        let contrib = &v.contributors.as_ref().unwrap()[16 * 33 + 16];
        assert_eq!(contrib[0].0, 0);
        assert!((contrib[1].1 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_map_renders_invalid_depth() {
        let intr = CameraIntrinsics::square(60.0, 8);
        let v = render(&SplatMap::new(), &up_pose(), &intr, false);
        assert!(v.depth.data.iter().all(|d| *d == INVALID_DEPTH));
        assert!(v.opacity.data.iter().all(|o| *o == 0.0));
    }
}
