//! Pinhole camera model and 5-DoF viewpoints.
//!
//! Camera frame: x right, y down, z along the optical axis. World frame is
//! z-up. Pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)` and the
//! principal point sits at the image center. Depth always means the
//! camera-frame z coordinate.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Horizontal and vertical field of view in degrees.
    pub fov_deg: [f64; 2],
    /// Width and height in pixels.
    pub resolution: [usize; 2],
    /// `[d_near, d_far]` in meters.
    pub depth_range: [f64; 2],
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fov_deg: [60.0, 60.0],
            resolution: [64, 64],
            depth_range: [0.1, 5.0],
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fov_deg: [f64; 2], resolution: [usize; 2], depth_range: [f64; 2]) -> Result<Self> {
        let intr = Self {
            fov_deg,
            resolution,
            depth_range,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-image convenience constructor with the default depth range.
    pub fn square(fov_deg: f64, res: usize) -> Self {
        Self {
            fov_deg: [fov_deg, fov_deg],
            resolution: [res, res],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [near, far] = self.depth_range;
        if !(near > 0.0 && near < far) {
            return Err(Error::Config(format!("depth range [{near}, {far}] invalid")));
        }
        if self.resolution[0] < 8 || self.resolution[1] < 8 {
            return Err(Error::Config("resolution components must be >= 8".into()));
        }
        if self.fov_deg.iter().any(|f| !(*f > 0.0 && *f < 180.0)) {
            return Err(Error::Config("field of view must lie in (0, 180)".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.resolution[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.resolution[1]
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    #[inline]
    pub fn near(&self) -> f64 {
        self.depth_range[0]
    }

    #[inline]
    pub fn far(&self) -> f64 {
        self.depth_range[1]
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        0.5 * self.resolution[0] as f64 / (0.5 * self.fov_deg[0].to_radians()).tan()
    }

    #[inline]
    pub fn fy(&self) -> f64 {
        0.5 * self.resolution[1] as f64 / (0.5 * self.fov_deg[1].to_radians()).tan()
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        0.5 * self.resolution[0] as f64
    }

    #[inline]
    pub fn cy(&self) -> f64 {
        0.5 * self.resolution[1] as f64
    }

    /// Direction through the center of pixel `(x, y)` scaled to unit camera
    /// z, so `depth * pixel_dir` is the camera-frame point at that depth.
    #[inline]
    pub fn pixel_dir(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx()) / self.fx(),
            (y as f64 + 0.5 - self.cy()) / self.fy(),
            1.0,
        )
    }

    /// Unit viewing ray through the center of pixel `(x, y)`, camera frame.
    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixel_dir(x, y).normalize()
    }

    /// Camera-frame point seen at pixel `(x, y)` with camera-z `depth`.
    #[inline]
    pub fn unproject(&self, x: usize, y: usize, depth: f64) -> Vector3<f64> {
        depth * self.pixel_dir(x, y)
    }

    /// Pixel coordinates of a camera-frame point (`z > 0` assumed).
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx() * p.x / p.z + self.cx(),
            self.fy() * p.y / p.z + self.cy(),
        )
    }

    /// Pixel containing the projected point, if it lands inside the image.
    #[inline]
    pub fn pixel_of(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let uv = self.project(p);
        if uv.x >= 0.0 && uv.y >= 0.0 {
            let (x, y) = (uv.x.floor() as usize, uv.y.floor() as usize);
            if x < self.width() && y < self.height() {
                return Some((x, y));
            }
        }
        None
    }

    /// All unit camera-frame pixel rays, row-major.
    pub fn pixel_rays(&self) -> Vec<Vector3<f64>> {
        let mut rays = Vec::with_capacity(self.pixel_count());
        for y in 0..self.height() {
            for x in 0..self.width() {
                rays.push(self.pixel_ray(x, y));
            }
        }
        rays
    }
}

/// Viewpoint: position plus yaw (about world z) and pitch; roll is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

impl Pose {
    pub fn new(position: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        Self {
            position,
            yaw,
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    /// Pose at `from` whose optical axis passes through `target`.
    pub fn look_at(from: Vector3<f64>, target: Vector3<f64>) -> Self {
        let d = target - from;
        let n = d.norm();
        if n < 1e-12 {
            return Self::new(from, 0.0, 0.0);
        }
        let d = d / n;
        Self::new(from, d.y.atan2(d.x), d.z.clamp(-1.0, 1.0).asin())
    }

    pub fn forward(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(cp * cy, cp * sy, sp)
    }

    /// Camera-to-world rotation; columns are the camera x, y, z axes.
    pub fn camera_to_world(&self) -> Matrix3<f64> {
        let f = self.forward();
        let (sy, cy) = self.yaw.sin_cos();
        let r = Vector3::new(sy, -cy, 0.0);
        let d = f.cross(&r);
        Matrix3::from_columns(&[r, d, f])
    }

    pub fn world_to_camera(&self) -> Matrix3<f64> {
        self.camera_to_world().transpose()
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera() * (p_world - self.position)
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.camera_to_world() * p_cam + self.position
    }
}
