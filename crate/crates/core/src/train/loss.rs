//! Photometric, depth and normal loss with gradients on the rendered channels.

use nalgebra::Vector3;

use super::normals::depth_normals;
use crate::camera::CameraIntrinsics;
use crate::scene::{RgbdFrame, INVALID_DEPTH};
use crate::splat::RenderedViews;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_d: f64,
    pub w_n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            w_d: 0.8,
            w_n: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    /// Cosine term plus total variation of the rendered normals.
    pub normal: f64,
}

impl LossParts {
    pub(crate) fn accumulate(&mut self, other: &LossParts, scale: f64) {
        self.total += scale * other.total;
        self.color += scale * other.color;
        self.depth += scale * other.depth;
        self.normal += scale * other.normal;
    }
}

/// Gradient of the weighted total loss with respect to each rendered channel.
#[derive(Debug, Clone)]
pub struct ViewGrads {
    pub color: Vec<Vector3<f64>>,
    /// Zero wherever the rendered depth is invalid.
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
}

/// L1 subgradient with `sign(0) = 0`.
#[inline]
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss(rendered: &RenderedViews, frame: &RgbdFrame, weights: &LossWeights, intr: &CameraIntrinsics) -> LossParts {
    evaluate(rendered, frame, weights, intr, false).0
}

pub(crate) fn evaluate(
    rendered: &RenderedViews,
    frame: &RgbdFrame,
    weights: &LossWeights,
    intr: &CameraIntrinsics,
    with_grads: bool,
) -> (LossParts, Option<ViewGrads>) {
    assert!(rendered.opacity.same_shape(&frame.depth), "render and frame shapes differ");
    let (w, h) = (intr.width(), intr.height());
    let n = w * h;
    let mut g = with_grads.then(|| ViewGrads {
        color: vec![Vector3::zeros(); n],
        depth: vec![0.0; n],
        normal: vec![Vector3::zeros(); n],
    });

    let mut lc = 0.0;
    let cscale = weights.w_c / (3 * n) as f64;
    for i in 0..n {
        let diff = rendered.color.data[i] - frame.rgb.data[i];
        lc += diff.abs().sum();
        if let Some(g) = g.as_mut() {
            g.color[i] = diff.map(sign0) * cscale;
        }
    }
    let color = lc / (3 * n) as f64;

    let depth_pairs: Vec<usize> = (0..n)
        .filter(|&i| frame.depth.data[i] != INVALID_DEPTH && rendered.depth.data[i] != INVALID_DEPTH)
        .collect();
    let mut depth = 0.0;
    if !depth_pairs.is_empty() {
        let m = depth_pairs.len() as f64;
        for &i in &depth_pairs {
            let diff = rendered.depth.data[i] - frame.depth.data[i];
            depth += diff.abs();
            if let Some(g) = g.as_mut() {
                g.depth[i] = weights.w_d * sign0(diff) / m;
            }
        }
        depth /= m;
    }

    let dn = depth_normals(&rendered.depth, intr);
    let c2w = frame.pose.camera_to_world();
    let cos_pixels: Vec<usize> = (0..n)
        .filter(|&i| rendered.normal.data[i].norm() > 0.0 && dn.normals.data[i] != Vector3::zeros())
        .collect();
    let mut cos_term = 0.0;
    let mut g_est = with_grads.then(|| vec![Vector3::zeros(); n]);
    if !cos_pixels.is_empty() {
        let m = cos_pixels.len() as f64;
        for &i in &cos_pixels {
            let nr = rendered.normal.data[i];
            let len = nr.norm();
            let nhat = nr / len;
            let est = c2w * dn.normals.data[i];
            let cos = nhat.dot(&est);
            cos_term += 1.0 - cos;
            if let (Some(g), Some(ge)) = (g.as_mut(), g_est.as_mut()) {
                let s = -weights.w_n / m;
                g.normal[i] += (est - nhat * cos) * (s / len);
                ge[i] = c2w.transpose() * (nhat * s);
            }
        }
        cos_term /= m;
    }

    let mut tv = 0.0;
    if w > 1 && h > 1 {
        let m = ((w - 1) * (h - 1)) as f64;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let i = y * w + x;
                for j in [i + 1, i + w] {
                    let diff = rendered.normal.data[i] - rendered.normal.data[j];
                    tv += diff.abs().sum();
                    if let Some(g) = g.as_mut() {
                        let s = diff.map(sign0) * (weights.w_n / m);
                        g.normal[i] += s;
                        g.normal[j] -= s;
                    }
                }
            }
        }
        tv /= m;
    }
    let normal = cos_term + tv;

    if let (Some(g), Some(ge)) = (g.as_mut(), g_est.as_ref()) {
        if !cos_pixels.is_empty() {
            for (gd, extra) in g.depth.iter_mut().zip(dn.vjp(&rendered.depth, ge)) {
                *gd += extra;
            }
        }
    }

    let parts = LossParts {
        total: weights.w_c * color + weights.w_d * depth + weights.w_n * normal,
        color,
        depth,
        normal,
    };
    (parts, g)
}
