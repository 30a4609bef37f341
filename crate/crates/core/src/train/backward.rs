//! Reverse-mode gradients through compositing, the per-pixel surfel depth and
//! the EWA projection.

use std::ops::{AddAssign, Mul};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::loss::{evaluate, LossParts, LossWeights, ViewGrads};
use crate::camera::CameraIntrinsics;
use crate::scene::{RgbdFrame, INVALID_DEPTH};
use crate::splat::{projection_jacobian, RenderPass, SplatMap};

/// Number of trainable scalars per surfel.
pub const PARAMS_PER_SURFEL: usize = 13;

/// Gradient for one surfel. `q` is ordered `(w, i, j, k)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurfelGrad {
    pub x: Vector3<f64>,
    pub q: Vector4<f64>,
    pub s: Vector2<f64>,
    pub c: Vector3<f64>,
    pub o: f64,
}

impl SurfelGrad {
    /// Layout: `x(3) q(4) s(2) c(3) o(1)`.
    pub fn to_array(&self) -> [f64; PARAMS_PER_SURFEL] {
        let mut a = [0.0; PARAMS_PER_SURFEL];
        a[0..3].copy_from_slice(self.x.as_slice());
        a[3..7].copy_from_slice(self.q.as_slice());
        a[7..9].copy_from_slice(self.s.as_slice());
        a[9..12].copy_from_slice(self.c.as_slice());
        a[12] = self.o;
        a
    }
}

impl AddAssign<&SurfelGrad> for SurfelGrad {
    fn add_assign(&mut self, rhs: &SurfelGrad) {
        self.x += rhs.x;
        self.q += rhs.q;
        self.s += rhs.s;
        self.c += rhs.c;
        self.o += rhs.o;
    }
}

impl Mul<f64> for SurfelGrad {
    type Output = SurfelGrad;
    fn mul(self, k: f64) -> SurfelGrad {
        SurfelGrad {
            x: self.x * k,
            q: self.q * k,
            s: self.s * k,
            c: self.c * k,
            o: self.o * k,
        }
    }
}

#[derive(Clone, Copy, Default)]
struct SlotAcc {
    g_mean: Vector2<f64>,
    g_cov: Matrix2<f64>,
    g_o: f64,
    g_c: Vector3<f64>,
    /// Gradient on the camera-facing normal.
    g_n: Vector3<f64>,
    /// Direct position gradient through the ray/plane distance.
    g_x: Vector3<f64>,
}

/// `d R(q) / d q_k` for `q = (w, x, y, z)` of unit norm.
fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Pulls `grads` on the rendered channels back to surfel parameters for the
/// view described by `pass`.
pub fn backward(map: &SplatMap, pass: &RenderPass, grads: &ViewGrads) -> Vec<SurfelGrad> {
    let (w, h) = (pass.intr.width(), pass.intr.height());
    let cam = pass.pose.position;
    let forward = pass.pose.forward();
    let mut acc = vec![SlotAcc::default(); pass.projected.len()];
    let mut contribs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            let (g_i, g_d, g_n) = (grads.color[pix], grads.depth[pix], grads.normal[pix]);
            if g_i == Vector3::zeros() && g_d == 0.0 && g_n == Vector3::zeros() {
                continue;
            }
            contribs.clear();
            pass.walk_pixel(x, y, |c| contribs.push(*c));
            let ray = pass.rays[pix];
            let mut suffix = 0.0;
            for ct in contribs.iter().rev() {
                let p = &pass.projected[ct.slot];
                let a = &mut acc[ct.slot];
                let (d, fallback) = pass.surfel_depth(ct.slot, pix);
                let v = g_i.dot(&p.color) + g_d * d + g_n.dot(&p.normal);
                let wt = ct.transmittance * ct.alpha;
                let g_alpha = ct.transmittance * v - suffix / (1.0 - ct.alpha);
                suffix += wt * v;

                a.g_c += g_i * wt;
                a.g_n += g_n * wt;
                if g_d != 0.0 {
                    let gd = g_d * wt;
                    if fallback {
                        a.g_x += forward * gd;
                    } else {
                        // d = rz · n·(x - C) / n·r
                        let rz = pass.ray_z[pix];
                        let rel = map.surfels[p.index].position - cam;
                        let nr = p.normal.dot(&ray);
                        let gt = gd * rz;
                        a.g_x += p.normal * (gt / nr);
                        a.g_n += (rel - ray * (d / rz)) * (gt / nr);
                    }
                }
                a.g_o += g_alpha * ct.alpha / p.opacity;
                let g_m2 = -0.5 * ct.alpha * g_alpha;
                let ad = p.conic * ct.delta;
                a.g_mean += ad * (-2.0 * g_m2);
                a.g_cov -= (ad * ad.transpose()) * g_m2;
            }
        }
    }

    let w2c = pass.pose.world_to_camera();
    let (fx, fy) = (pass.intr.fx(), pass.intr.fy());
    let mut out = vec![SurfelGrad::default(); map.len()];
    for (p, a) in pass.projected.iter().zip(&acc) {
        let s = &map.surfels[p.index];
        let g = &mut out[p.index];
        g.c = a.g_c;
        g.o = a.g_o;

        // projection: mean and Jacobian depend on the camera-frame center
        let (px, py, pz) = (p.cam.x, p.cam.y, p.cam.z);
        let mut g_p: Vector3<f64> = projection_jacobian(&p.cam, fx, fy).transpose() * a.g_mean;
        let g_cov_cam = p.jac.transpose() * a.g_cov * p.jac;
        let g_j: Matrix2x3<f64> = a.g_cov * p.jac * p.cov_cam * 2.0;
        let iz2 = 1.0 / (pz * pz);
        let iz3 = iz2 / pz;
        g_p.z += g_j[(0, 0)] * (-fx * iz2) + g_j[(1, 1)] * (-fy * iz2);
        // a clamped slope pins t = c·z, leaving only the z dependence
        if p.clamped[0] {
            g_p.z += g_j[(0, 2)] * (fx * p.jac_at.x * iz3);
        } else {
            g_p.x += g_j[(0, 2)] * (-fx * iz2);
            g_p.z += g_j[(0, 2)] * (2.0 * fx * px * iz3);
        }
        if p.clamped[1] {
            g_p.z += g_j[(1, 2)] * (fy * p.jac_at.y * iz3);
        } else {
            g_p.y += g_j[(1, 2)] * (-fy * iz2);
            g_p.z += g_j[(1, 2)] * (2.0 * fy * py * iz3);
        }
        g.x = w2c.transpose() * g_p + a.g_x;

        // covariance: Σ = M Mᵀ with M = [sx r1, sy r2, 0]
        let g_sigma = w2c.transpose() * g_cov_cam * w2c;
        let rot = s.rotation_matrix();
        let (r1, r2) = (rot.column(0).into_owned(), rot.column(1).into_owned());
        let gm0 = (g_sigma + g_sigma.transpose()) * (r1 * s.scale.x);
        let gm1 = (g_sigma + g_sigma.transpose()) * (r2 * s.scale.y);
        g.s = Vector2::new(gm0.dot(&r1), gm1.dot(&r2));
        let g_rot = Matrix3::from_columns(&[gm0 * s.scale.x, gm1 * s.scale.y, a.g_n * p.flip]);

        let qv = Vector4::new(s.rotation.w, s.rotation.i, s.rotation.j, s.rotation.k);
        let len = qv.norm();
        let qhat = qv / len;
        let partials = rotation_partials(&qhat);
        let g_qhat = Vector4::from_fn(|k, _| g_rot.component_mul(&partials[k]).sum());
        g.q = (g_qhat - qhat * qhat.dot(&g_qhat)) / len;
    }
    out
}

/// Loss of `map` against `frame` (rendered at the frame's pose) and its
/// gradient for every surfel.
pub fn gradients(map: &SplatMap, frame: &RgbdFrame, intr: &CameraIntrinsics, weights: &LossWeights) -> (LossParts, Vec<SurfelGrad>) {
    let pass = RenderPass::new(map, &frame.pose, intr);
    let rendered = pass.composite(false);
    let (parts, grads) = evaluate(&rendered, frame, weights, intr, true);
    let mut grads = grads.expect("gradients requested");
    for (g, d) in grads.depth.iter_mut().zip(&rendered.depth.data) {
        if *d == INVALID_DEPTH {
            *g = 0.0;
        }
    }
    (parts, backward(map, &pass, &grads))
}
