//! Normals from a camera-z depth map: bilateral filter, unprojection and central
//! differences, with the matching vector-Jacobian product.

use nalgebra::Vector3;

use crate::camera::CameraIntrinsics;
use crate::image::ImageBuf;
use crate::scene::INVALID_DEPTH;

pub const BILATERAL_SIGMA_PX: f64 = 2.0;
pub const BILATERAL_SIGMA_M: f64 = 0.05;
const RADIUS: i64 = 2;
/// Cross products shorter than this give no normal.
const MIN_CROSS: f64 = 1e-12;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DepthNormals {
    /// Camera-frame unit normals facing the camera; zero where undefined.
    pub normals: ImageBuf<Vector3<f64>>,
    /// Bilateral-filtered depth, `INVALID_DEPTH` where the input is invalid.
    pub filtered: ImageBuf<f64>,
    /// Unnormalized cross product `a × b` per pixel.
    cross: Vec<Vector3<f64>>,
    /// `+1`/`-1` orientation applied to the cross product; 0 where undefined.
    pub sign: Vec<f64>,
    /// Filter normalizer per pixel.
    weight_sum: Vec<f64>,
    /// Unit-z pixel directions.
    rays: Vec<Vector3<f64>>,
}

fn valid(d: f64) -> bool {
    d != INVALID_DEPTH
}

#[inline]
fn bilateral_weight(dx: i64, dy: i64, du: f64, dv: f64) -> f64 {
    let s2 = (dx * dx + dy * dy) as f64;
    let r = dv - du;
    (-s2 / (2.0 * BILATERAL_SIGMA_PX * BILATERAL_SIGMA_PX) - r * r / (2.0 * BILATERAL_SIGMA_M * BILATERAL_SIGMA_M)).exp()
}

/// Camera-frame normals estimated from a camera-z `depth` map.
pub fn normal_from_depth(depth: &ImageBuf<f64>, intr: &CameraIntrinsics) -> ImageBuf<Vector3<f64>> {
    depth_normals(depth, intr).normals
}

pub fn depth_normals(depth: &ImageBuf<f64>, intr: &CameraIntrinsics) -> DepthNormals {
    let (w, h) = (depth.width, depth.height);
    let rays: Vec<Vector3<f64>> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| intr.pixel_dir(x, y)).collect();
    let mut filtered = ImageBuf::filled(w, h, INVALID_DEPTH);
    let mut weight_sum = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let du = *depth.at(x as usize, y as usize);
            if !valid(du) {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -RADIUS..=RADIUS {
                for dx in -RADIUS..=RADIUS {
                    let (vx, vy) = (x + dx, y + dy);
                    if vx < 0 || vy < 0 || vx >= w as i64 || vy >= h as i64 {
                        continue;
                    }
                    let dv = *depth.at(vx as usize, vy as usize);
                    if !valid(dv) {
                        continue;
                    }
                    let wt = bilateral_weight(dx, dy, du, dv);
                    num += wt * dv;
                    den += wt;
                }
            }
            let i = y as usize * w + x as usize;
            filtered.data[i] = num / den;
            weight_sum[i] = den;
        }
    }
    let point = |i: usize| filtered.data[i] * rays[i];
    let mut normals = ImageBuf::filled(w, h, Vector3::zeros());
    let mut cross = vec![Vector3::zeros(); w * h];
    let mut sign = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let nb = [i - 1, i + 1, i - w, i + w];
            if !valid(filtered.data[i]) || nb.iter().any(|&j| !valid(filtered.data[j])) {
                continue;
            }
            let a = point(i + 1) - point(i - 1);
            let b = point(i + w) - point(i - w);
            let c = a.cross(&b);
            let len = c.norm();
            if len < MIN_CROSS {
                continue;
            }
            let s = if c.dot(&point(i)) > 0.0 { -1.0 } else { 1.0 };
            cross[i] = c;
            sign[i] = s;
            normals.data[i] = c * (s / len);
        }
    }
    DepthNormals {
        normals,
        filtered,
        cross,
        sign,
        weight_sum,
        rays,
    }
}

impl DepthNormals {
    /// Pulls a gradient on the output normals back onto the input depth.
    pub fn vjp(&self, depth: &ImageBuf<f64>, g_normals: &[Vector3<f64>]) -> Vec<f64> {
        let (w, h) = (depth.width, depth.height);
        let mut g_p = vec![Vector3::zeros(); w * h];
        for i in 0..w * h {
            let s = self.sign[i];
            if s == 0.0 {
                continue;
            }
            let g = g_normals[i];
            if g == Vector3::zeros() {
                continue;
            }
            let c = self.cross[i];
            let len = c.norm();
            let chat = c / len;
            let g_c = (g - chat * chat.dot(&g)) * (s / len);
            let a = self.point(i + 1) - self.point(i - 1);
            let b = self.point(i + w) - self.point(i - w);
            let g_a = b.cross(&g_c);
            let g_b = g_c.cross(&a);
            g_p[i + 1] += g_a;
            g_p[i - 1] -= g_a;
            g_p[i + w] += g_b;
            g_p[i - w] -= g_b;
        }
        let mut g_d = vec![0.0; w * h];
        let inv_r2 = 1.0 / (BILATERAL_SIGMA_M * BILATERAL_SIGMA_M);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                let g_f = self.rays[i].dot(&g_p[i]);
                if g_f == 0.0 || !valid(self.filtered.data[i]) {
                    continue;
                }
                let (du, fu, wsum) = (depth.data[i], self.filtered.data[i], self.weight_sum[i]);
                let scale = g_f / wsum;
                let mut self_term = 0.0;
                for dy in -RADIUS..=RADIUS {
                    for dx in -RADIUS..=RADIUS {
                        let (vx, vy) = (x + dx, y + dy);
                        if vx < 0 || vy < 0 || vx >= w as i64 || vy >= h as i64 {
                            continue;
                        }
                        let j = vy as usize * w + vx as usize;
                        let dv = depth.data[j];
                        if !valid(dv) {
                            continue;
                        }
                        let wt = bilateral_weight(dx, dy, du, dv);
                        // dF/dD_v through the weight's range term, and the
                        // matching dependence on the center value D_u
                        let range = (dv - fu) * wt * (dv - du) * inv_r2;
                        g_d[j] += scale * (wt - range);
                        self_term += range;
                    }
                }
                g_d[i] += scale * self_term;
            }
        }
        g_d
    }

    fn point(&self, i: usize) -> Vector3<f64> {
        self.filtered.data[i] * self.rays[i]
    }
}
