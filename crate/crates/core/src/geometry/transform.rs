use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Rigid motion `x -> R x + t` (rotation dimensionless, translation in meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Six-number pose parameterization: axis-angle rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector {
    axis_angle: Vector3<f64>,
    translation: Vector3<f64>,
}

impl PoseVector {
    /// Requires `|axis_angle| < pi` and finite entries.
    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let axis_angle = Vector3::from(axis_angle);
        let translation = Vector3::from(translation);
        if !axis_angle.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("pose vector has non-finite entries".into()));
        }
        if axis_angle.norm() >= PI {
            return Err(Error::Domain(format!(
                "rotation angle {} is not below pi",
                axis_angle.norm()
            )));
        }
        Ok(Self {
            axis_angle,
            translation,
        })
    }

    pub fn from_slice(v: &[f64; 6]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        self.axis_angle
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (w, t) = (self.axis_angle, self.translation);
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }
}

pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula. `R = I + (sin θ/θ) K + (2 sin²(θ/2)/θ²) K²` with `K = [w]x`.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-12 {
        return Matrix3::identity() + k;
    }
    let a = theta.sin() / theta;
    let half = (0.5 * theta).sin();
    let b = 2.0 * half * half / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

pub fn pose_vector_to_transform(v: &PoseVector) -> RigidTransform {
    RigidTransform {
        rotation: rodrigues(&v.axis_angle),
        translation: v.translation,
    }
}

/// Applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from a raw 3x3 block, projecting it onto SO(3) by
    /// polar decomposition. Reflections and singular blocks are rejected.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("transform has non-finite entries".into()));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::Domain("rotation SVD failed".into())),
        };
        if svd.singular_values.min() < 1e-6 {
            return Err(Error::Domain("rotation block is singular".into()));
        }
        let r = u * v_t;
        if r.determinant() < 0.0 {
            return Err(Error::Domain("rotation block is a reflection".into()));
        }
        Ok(Self {
            rotation: r,
            translation,
        })
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::from_parts(r, Vector3::new(v[3], v[7], v[11]))
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let r = &self.rotation;
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        s.atan2((r.trace() - 1.0) / 2.0)
    }

    /// Axis-angle and translation of this transform (angle must be below pi).
    pub fn to_pose_vector(&self) -> Result<PoseVector> {
        let angle = self.angle();
        let r = &self.rotation;
        let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let w = if angle < 1e-12 {
            v * 0.5
        } else {
            v * (angle / (2.0 * angle.sin()))
        };
        PoseVector::new([w.x, w.y, w.z], [self.translation.x, self.translation.y, self.translation.z])
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}
