use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Camera-to-world poses with strictly increasing frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    indices: Vec<usize>,
    poses: Vec<RigidTransform>,
}

impl Trajectory {
    pub fn new(indices: Vec<usize>, poses: Vec<RigidTransform>) -> Result<Self> {
        if indices.len() != poses.len() {
            return Err(Error::IndexMismatch(format!(
                "{} indices for {} poses",
                indices.len(),
                poses.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::IndexMismatch("indices must be strictly increasing".into()));
        }
        Ok(Self { indices, poses })
    }

    /// Indices `0..n`.
    pub fn from_poses(poses: Vec<RigidTransform>) -> Self {
        Self {
            indices: (0..poses.len()).collect(),
            poses,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Chains relative motions `T_{k+1 -> k}` starting from the identity.
    pub fn from_relative(relative: &[RigidTransform]) -> Self {
        let mut poses = vec![RigidTransform::identity()];
        for r in relative {
            let last = *poses.last().expect("non-empty");
            poses.push(last.compose(r));
        }
        Self::from_poses(poses)
    }

    /// The same trajectory seen from another world frame: `g ∘ P_i`.
    pub fn transformed(&self, g: &RigidTransform) -> Self {
        Self {
            indices: self.indices.clone(),
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryMetrics {
    /// Meters, after rigid alignment.
    pub ate: f64,
    pub rpe_m: f64,
    pub rpe_deg: f64,
}

/// Rotation and translation minimizing `sum |R a_i + t - b_i|^2`.
pub fn rigid_alignment(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<RigidTransform> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("cannot align {} points to {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    RigidTransform::from_parts(r, cb - r * ca)
}

pub fn odometry_metrics(pred: &Trajectory, gt: &Trajectory) -> Result<OdometryMetrics> {
    if pred.indices != gt.indices {
        return Err(Error::IndexMismatch("predicted and reference frame indices differ".into()));
    }
    if pred.len() < 2 {
        return Err(Error::IndexMismatch("need at least two poses".into()));
    }
    let pa: Vec<Vector3<f64>> = pred.poses.iter().map(|p| p.translation).collect();
    let pb: Vec<Vector3<f64>> = gt.poses.iter().map(|p| p.translation).collect();
    let g = rigid_alignment(&pa, &pb)?;
    let n = pa.len() as f64;
    let ate = (pa.iter().zip(&pb).map(|(p, q)| (g.apply(p) - q).norm_squared()).sum::<f64>() / n).sqrt();

    let (mut sq_t, mut sq_r) = (0.0, 0.0);
    let pairs = (pred.len() - 1) as f64;
    for i in 0..pred.len() - 1 {
        let rel_p = pred.poses[i].inverse().compose(&pred.poses[i + 1]);
        let rel_g = gt.poses[i].inverse().compose(&gt.poses[i + 1]);
        let err = rel_g.inverse().compose(&rel_p);
        sq_t += err.translation.norm_squared();
        sq_r += err.angle().to_degrees().powi(2);
    }
    Ok(OdometryMetrics {
        ate,
        rpe_m: (sq_t / pairs).sqrt(),
        rpe_deg: (sq_r / pairs).sqrt(),
    })
}
