//! Incremental optimization of surfel parameters against the captured frames.

mod backward;
pub mod gradcheck;
mod loss;
mod normals;

pub use backward::{backward, gradients, SurfelGrad, PARAMS_PER_SURFEL};
pub use loss::{loss, LossParts, LossWeights, ViewGrads};
pub use normals::{depth_normals, normal_from_depth, DepthNormals, BILATERAL_SIGMA_M, BILATERAL_SIGMA_PX};

use nalgebra::Quaternion;
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::camera::CameraIntrinsics;
use crate::rng::Rng;
use crate::scene::RgbdFrame;
use crate::splat::SplatMap;

pub const MIN_OPACITY: f64 = 1e-4;
pub const MAX_OPACITY: f64 = 1.0 - 1e-4;
pub const MIN_SCALE: f64 = 1e-3;
pub const MAX_SCALE: f64 = 0.5;

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub x: f64,
    pub q: f64,
    pub s: f64,
    pub c: f64,
    pub o: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            x: 2e-4,
            q: 1e-3,
            s: 5e-3,
            c: 5e-3,
            o: 5e-2,
        }
    }
}

impl LearningRates {
    fn per_param(&self) -> [f64; PARAMS_PER_SURFEL] {
        let mut lr = [0.0; PARAMS_PER_SURFEL];
        lr[0..3].fill(self.x);
        lr[3..7].fill(self.q);
        lr[7..9].fill(self.s);
        lr[9..12].fill(self.c);
        lr[12] = self.o;
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations_per_step: usize,
    pub recent_frames: usize,
    pub random_frames: usize,
    pub lr: LearningRates,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Per-component bound applied to the batch-averaged gradient.
    pub grad_clip: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_per_step: 10,
            recent_frames: 3,
            random_frames: 5,
            lr: LearningRates::default(),
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: 100.0,
            weights: LossWeights::default(),
        }
    }
}

/// Adam moments, one row per surfel, kept aligned with the map.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub t: u64,
    m: Vec<[f64; PARAMS_PER_SURFEL]>,
    v: Vec<[f64; PARAMS_PER_SURFEL]>,
}

impl Optimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends zero moments for newly spawned surfels.
    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, [0.0; PARAMS_PER_SURFEL]);
        self.v.resize(n, [0.0; PARAMS_PER_SURFEL]);
    }

    /// Compacts moments with the remap produced by pruning.
    pub fn remap(&mut self, remap: &[Option<usize>]) {
        let keep = |rows: &mut Vec<[f64; PARAMS_PER_SURFEL]>| {
            let mut out = vec![[0.0; PARAMS_PER_SURFEL]; remap.iter().flatten().count()];
            for (old, new) in remap.iter().enumerate() {
                if let (Some(new), Some(row)) = (new, rows.get(old)) {
                    out[*new] = *row;
                }
            }
            *rows = out;
        };
        keep(&mut self.m);
        keep(&mut self.v);
    }

    /// One Adam update followed by re-normalization and clamping.
    pub fn step(&mut self, map: &mut SplatMap, grads: &[SurfelGrad], cfg: &TrainConfig) {
        self.resize(map.len());
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = cfg.lr.per_param();
        for (i, s) in map.surfels.iter_mut().enumerate() {
            let g = grads[i].to_array();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut p = [
                s.position.x,
                s.position.y,
                s.position.z,
                s.rotation.w,
                s.rotation.i,
                s.rotation.j,
                s.rotation.k,
                s.scale.x,
                s.scale.y,
                s.color.x,
                s.color.y,
                s.color.z,
                s.opacity,
            ];
            for k in 0..PARAMS_PER_SURFEL {
                let gk = g[k].clamp(-cfg.grad_clip, cfg.grad_clip);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= lr[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            }
            s.position = nalgebra::Vector3::new(p[0], p[1], p[2]);
            let q = Quaternion::new(p[3], p[4], p[5], p[6]);
            let n = q.norm();
            if n > 1e-12 {
                s.rotation = q / n;
            }
            s.scale = nalgebra::Vector2::new(p[7].clamp(MIN_SCALE, MAX_SCALE), p[8].clamp(MIN_SCALE, MAX_SCALE));
            s.color = nalgebra::Vector3::new(p[9], p[10], p[11]).map(|c| c.clamp(0.0, 1.0));
            s.opacity = p[12].clamp(MIN_OPACITY, MAX_OPACITY);
        }
    }
}

/// Indices of the frames used in one iteration: the most recent frames plus
/// distinct random earlier ones, in ascending order.
pub fn select_batch(n_frames: usize, cfg: &TrainConfig, rng: &mut Rng) -> Vec<usize> {
    let recent = cfg.recent_frames.min(n_frames);
    let earlier = n_frames - recent;
    let mut batch: Vec<usize> = sample(rng, earlier, cfg.random_frames.min(earlier)).into_vec();
    batch.sort_unstable();
    batch.extend(earlier..n_frames);
    batch
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Batch-mean total loss before each iteration's update.
    pub totals: Vec<f64>,
    /// Batch-mean loss parts of the last iteration.
    pub last: LossParts,
}

/// Batch-averaged loss and gradients over `frames[batch]`.
pub fn batch_gradients(
    map: &SplatMap,
    frames: &[RgbdFrame],
    batch: &[usize],
    intr: &CameraIntrinsics,
    weights: &LossWeights,
) -> (LossParts, Vec<SurfelGrad>) {
    let per_frame: Vec<(LossParts, Vec<SurfelGrad>)> = batch
        .par_iter()
        .map(|&i| gradients(map, &frames[i], intr, weights))
        .collect();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut parts = LossParts::default();
    let mut grads = vec![SurfelGrad::default(); map.len()];
    for (p, g) in &per_frame {
        parts.accumulate(p, scale);
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &(*gi * scale);
        }
    }
    (parts, grads)
}

/// Runs `cfg.iterations_per_step` optimizer iterations over the frame history.
pub fn train_step(
    map: &mut SplatMap,
    opt: &mut Optimizer,
    frames: &[RgbdFrame],
    intr: &CameraIntrinsics,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> TrainTrace {
    let mut trace = TrainTrace::default();
    if frames.is_empty() || map.is_empty() {
        return trace;
    }
    for _ in 0..cfg.iterations_per_step {
        let batch = select_batch(frames.len(), cfg, rng);
        let (parts, grads) = batch_gradients(map, frames, &batch, intr, &cfg.weights);
        opt.step(map, &grads, cfg);
        trace.totals.push(parts.total);
        trace.last = parts;
    }
    trace
}
