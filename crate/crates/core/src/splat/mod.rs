//! 2D Gaussian surfels and the map that holds them.

mod densify;
mod render;

pub use densify::{densify_mask, prune_invisible, spawn, DensifyMask, DensifyThresholds, SpawnConfig};
pub use render::{
    project, render, visible_surfels, Contribution, Projection, ProjectedSurfel, RenderPass, RenderedViews,
    BLUR, GUARD_BAND, HIT_RADIUS, MIN_DEPTH_OPACITY, MIN_TRANSMITTANCE, PARALLEL_EPS, TRUNCATION_M2,
};
pub(crate) use render::projection_jacobian;

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Allowed deviation of `|q|` from one.
pub const QUAT_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub scale: Vector2<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub confidence: f64,
}

/// Rotation matrix of `q / |q|`, quaternion stored as `(w, i, j, k)`.
pub fn quat_to_rotation(q: &Quaternion<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn rotation_to_quat(r: &Matrix3<f64>) -> Quaternion<f64> {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = uq.into_inner();
    // keep w >= 0 for a canonical serialization
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Unit quaternion whose third rotation axis is `normal`. The in-plane axis is
/// the world axis most orthogonal to the normal, projected onto the plane.
pub fn quat_from_normal(normal: &Vector3<f64>) -> Quaternion<f64> {
    let n = normal.normalize();
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let a = axes
        .iter()
        .min_by(|a, b| a.dot(&n).abs().total_cmp(&b.dot(&n).abs()))
        .copied()
        .unwrap();
    let x = (a - a.dot(&n) * n).normalize();
    let y = n.cross(&x);
    rotation_to_quat(&Matrix3::from_columns(&[x, y, n]))
}

impl Surfel {
    pub fn new(
        position: Vector3<f64>,
        rotation: Quaternion<f64>,
        scale: Vector2<f64>,
        color: Vector3<f64>,
        opacity: f64,
    ) -> Self {
        Self {
            position,
            rotation,
            scale,
            color,
            opacity,
            confidence: 0.0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.rotation)
    }

    /// Third column of the rotation: the null direction of the covariance.
    pub fn normal(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }

    /// `R diag(sx^2, sy^2, 0) R^T`.
    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        let norm = self.rotation.norm();
        if (norm - 1.0).abs() > QUAT_UNIT_TOL {
            return Err(Error::NonUnitQuaternion(norm));
        }
        Ok(self.covariance_unchecked())
    }

    pub(crate) fn covariance_unchecked(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::new(
            self.scale.x * self.scale.x,
            self.scale.y * self.scale.y,
            0.0,
        ));
        r * s * r.transpose()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatMap {
    pub surfels: Vec<Surfel>,
    /// Mapping step at which each surfel was spawned.
    pub creation_step: Vec<usize>,
}

impl SplatMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn push(&mut self, surfel: Surfel, step: usize) {
        self.surfels.push(surfel);
        self.creation_step.push(step);
    }

    /// Keeps surfels where `keep[i]` and returns the old -> new index remap.
    pub fn retain_mask(&mut self, keep: &[bool]) -> Vec<Option<usize>> {
        assert_eq!(keep.len(), self.len());
        let mut remap = Vec::with_capacity(keep.len());
        let mut next = 0;
        for &k in keep {
            if k {
                remap.push(Some(next));
                next += 1;
            } else {
                remap.push(None);
            }
        }
        let mut i = 0;
        self.surfels.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.creation_step.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        remap
    }

    /// One record per surfel: `x y z qw qx qy qz sx sy r g b o k`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# x y z qw qx qy qz sx sy r g b o k")?;
        for s in &self.surfels {
            let q = s.rotation;
            writeln!(
                f,
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                s.position.x,
                s.position.y,
                s.position.z,
                q.w,
                q.i,
                q.j,
                q.k,
                s.scale.x,
                s.scale.y,
                s.color.x,
                s.color.y,
                s.color.z,
                s.opacity,
                s.confidence
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut map = Self::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<_>>()?;
            if v.len() != 14 {
                return Err(parse_err(format!("expected 14 fields, found {}", v.len())));
            }
            let mut s = Surfel::new(
                Vector3::new(v[0], v[1], v[2]),
                Quaternion::new(v[3], v[4], v[5], v[6]),
                Vector2::new(v[7], v[8]),
                Vector3::new(v[9], v[10], v[11]),
                v[12],
            );
            s.confidence = v[13];
            map.push(s, 0);
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn quat(w: f64, x: f64, y: f64, z: f64) -> Quaternion<f64> {
        let q = Quaternion::new(w, x, y, z);
        q / q.norm()
    }

    #[test]
    fn identity_covariance() {
        let s = Surfel::new(
            Vector3::zeros(),
            Quaternion::identity(),
            Vector2::new(0.1, 0.2),
            Vector3::zeros(),
            0.5,
        );
        let c = s.covariance().unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(0.01, 0.04, 0.0));
        assert!((c - expect).norm() < 1e-15);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let s = Surfel::new(
            Vector3::zeros(),
            Quaternion::new(1.1, 0.0, 0.0, 0.0),
            Vector2::new(0.1, 0.2),
            Vector3::zeros(),
            0.5,
        );
        assert!(matches!(s.covariance(), Err(Error::NonUnitQuaternion(_))));
    }

    #[test]
    fn normal_quaternion_round_trip() {
        for n in [Vector3::z(), -Vector3::x(), Vector3::new(0.3, -0.4, 0.5).normalize()] {
            let q = quat_from_normal(&n);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert!((quat_to_rotation(&q).column(2) - n).norm() < 1e-12);
        }
    }

    #[test]
    fn retain_builds_remap() {
        let mut m = SplatMap::new();
        for i in 0..4 {
            let mut s = Surfel::new(Vector3::repeat(i as f64), Quaternion::identity(), Vector2::repeat(0.1), Vector3::zeros(), 0.5);
            s.confidence = i as f64;
            m.push(s, i);
        }
        let remap = m.retain_mask(&[true, false, false, true]);
        assert_eq!(remap, vec![Some(0), None, None, Some(1)]);
        assert_eq!(m.creation_step, vec![0, 3]);
        assert_eq!(m.surfels[1].confidence, 3.0);
    }

    #[test]
    fn surfel_file_round_trip() {
        let mut m = SplatMap::new();
        let mut s = Surfel::new(
            Vector3::new(1.0, 2.0, 3.0),
            quat(0.3, 0.1, -0.2, 0.9),
            Vector2::new(0.01, 0.02),
            Vector3::new(0.1, 0.2, 0.3),
            0.7,
        );
        s.confidence = 1.25;
        m.push(s, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        m.save(&p).unwrap();
        assert_eq!(SplatMap::load(&p).unwrap().surfels, m.surfels);
    }

    proptest! {
        #[test]
        fn covariance_is_rank_two_with_scale_spectrum(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            sx in 0.001f64..0.5, sy in 0.001f64..0.5,
        ) {
            prop_assume!(Quaternion::new(w, x, y, z).norm() > 0.1);
            let s = Surfel::new(Vector3::zeros(), quat(w, x, y, z), Vector2::new(sx, sy), Vector3::zeros(), 0.5);
            let c = s.covariance().unwrap();
            prop_assert!((c - c.transpose()).norm() < 1e-15);
            prop_assert!((c * s.normal()).norm() < 1e-12);
            let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut expect = vec![0.0, sx * sx, sy * sy];
            expect.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
