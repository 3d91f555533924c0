//! Differentiable projective warping and bilinear sampling on batched tensors.
//!
//! Shapes: images `[B, C, H, W]`, depth `[B, 1, H, W]`, rotations `[B, 3, 3]`,
//! translations `[B, 3, 1]`. Every function is generic over the float dtype of
//! its inputs, so the same code path runs in `f64` for verification and `f32`
//! for training.

use candle_core::{DType, Device, Tensor};

use super::{CameraIntrinsics, RigidTransform};
use crate::error::{Error, Result};

/// Transformed points with `z` at or below this many meters are marked invalid.
pub const MIN_WARP_DEPTH: f64 = 1e-6;

/// A batch of rigid transforms living on the autograd tape.
#[derive(Debug, Clone)]
pub struct PoseBatch {
    pub rotation: Tensor,
    pub translation: Tensor,
}

impl PoseBatch {
    pub fn identity(batch: usize, dtype: DType) -> Result<Self> {
        let rotation = Tensor::eye(3, dtype, &Device::Cpu)?
            .unsqueeze(0)?
            .repeat((batch, 1, 1))?;
        let translation = Tensor::zeros((batch, 3, 1), dtype, &Device::Cpu)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_transforms(ts: &[RigidTransform], dtype: DType) -> Result<Self> {
        let mut r = Vec::with_capacity(ts.len() * 9);
        let mut t = Vec::with_capacity(ts.len() * 3);
        for tr in ts {
            for i in 0..3 {
                for j in 0..3 {
                    r.push(tr.rotation[(i, j)]);
                }
                t.push(tr.translation[i]);
            }
        }
        let b = ts.len();
        Ok(Self {
            rotation: Tensor::from_vec(r, (b, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
            translation: Tensor::from_vec(t, (b, 3, 1), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    /// Rodrigues map from `[B, 6]` pose vectors (axis-angle, translation).
    ///
    /// A tiny offset inside the square root keeps the gradient finite at the
    /// zero rotation; it perturbs the coefficients by roughly `1e-21`.
    pub fn from_pose_vectors(v: &Tensor) -> Result<Self> {
        let (b, six) = v.dims2()?;
        if six != 6 {
            return Err(Error::Shape(format!("pose vectors must be [B, 6], got {:?}", v.dims())));
        }
        let w = v.narrow(1, 0, 3)?;
        let translation = v.narrow(1, 3, 3)?.unsqueeze(2)?;
        let theta2 = (w.sqr()?.sum_keepdim(1)? + 1e-20)?;
        let theta = theta2.sqrt()?;
        let a = (theta.sin()? / &theta)?.reshape((b, 1, 1))?;
        let half = (&theta * 0.5)?.sin()?;
        let bcoef = ((half.sqr()? * 2.0)? / &theta2)?.reshape((b, 1, 1))?;

        let wx = w.narrow(1, 0, 1)?;
        let wy = w.narrow(1, 1, 1)?;
        let wz = w.narrow(1, 2, 1)?;
        let zero = wx.zeros_like()?;
        let k = Tensor::cat(
            &[&zero, &wz.neg()?, &wy, &wz, &zero, &wx.neg()?, &wy.neg()?, &wx, &zero],
            1,
        )?
        .reshape((b, 3, 3))?;
        let eye = Tensor::eye(3, v.dtype(), v.device())?
            .unsqueeze(0)?
            .broadcast_as((b, 3, 3))?;
        let kk = k.matmul(&k)?;
        let rotation = (eye + k.broadcast_mul(&a)? + kk.broadcast_mul(&bcoef)?)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Items `start..start + len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<PoseBatch> {
        Ok(Self {
            rotation: self.rotation.narrow(0, start, len)?,
            translation: self.translation.narrow(0, start, len)?,
        })
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.rotation.dim(0)?)
    }

    pub fn dtype(&self) -> DType {
        self.rotation.dtype()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseBatch) -> Result<PoseBatch> {
        Ok(PoseBatch {
            rotation: self.rotation.matmul(&other.rotation)?,
            translation: (self.rotation.matmul(&other.translation)? + &self.translation)?,
        })
    }

    pub fn inverse(&self) -> Result<PoseBatch> {
        let rt = self.rotation.transpose(1, 2)?.contiguous()?;
        let translation = rt.matmul(&self.translation)?.neg()?;
        Ok(PoseBatch {
            rotation: rt,
            translation,
        })
    }

    pub fn detach(&self) -> PoseBatch {
        PoseBatch {
            rotation: self.rotation.detach(),
            translation: self.translation.detach(),
        }
    }

    /// Applies the transforms to `[B, 3, N]` points.
    pub fn apply(&self, points: &Tensor) -> Result<Tensor> {
        Ok(self.rotation.matmul(points)?.broadcast_add(&self.translation)?)
    }

    pub fn to_transforms(&self) -> Result<Vec<RigidTransform>> {
        let r = self.rotation.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let t = self.translation.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(r.iter()
            .zip(t.iter())
            .map(|(r, t)| RigidTransform {
                rotation: nalgebra::Matrix3::from_fn(|i, j| r[i][j]),
                translation: nalgebra::Vector3::new(t[0][0], t[1][0], t[2][0]),
            })
            .collect())
    }
}

/// `[3, H*W]` normalized rays `K^-1 [u, v, 1]` in row-major pixel order.
pub fn pixel_rays(k: &CameraIntrinsics, dtype: DType) -> Result<Tensor> {
    let n = k.width * k.height;
    let mut data = vec![0.0f64; 3 * n];
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            data[i] = (u as f64 - k.cx) / k.fx;
            data[n + i] = (v as f64 - k.cy) / k.fy;
            data[2 * n + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, n), &Device::Cpu)?.to_dtype(dtype)?)
}

fn check_depth_dims(depth: &Tensor, k: &CameraIntrinsics) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = depth.dims4()?;
    if c != 1 || h != k.height || w != k.width {
        return Err(Error::Shape(format!(
            "depth {:?} does not match a {}x{} camera",
            depth.dims(),
            k.width,
            k.height
        )));
    }
    Ok((b, h, w))
}

/// Camera-frame points `D(p) K^-1 p` as `[B, 3, H*W]`.
pub fn backproject_tensor(depth: &Tensor, k: &CameraIntrinsics) -> Result<Tensor> {
    let (b, h, w) = check_depth_dims(depth, k)?;
    let rays = pixel_rays(k, depth.dtype())?.unsqueeze(0)?;
    Ok(rays.broadcast_mul(&depth.reshape((b, 1, h * w))?)?)
}

/// Sampling locations in the source image for every target pixel.
#[derive(Debug, Clone)]
pub struct WarpGrid {
    /// `[B, 1, H, W]` horizontal source coordinate.
    pub u: Tensor,
    /// `[B, 1, H, W]` vertical source coordinate.
    pub v: Tensor,
    /// `[B, 1, H, W]` 1.0 where the sample is usable, 0.0 otherwise.
    pub valid: Tensor,
}

/// Projects `[B, 3, N]` camera-frame points through `k` into a grid of shape
/// `(h, w)` with `h * w = N`.
pub fn project_points(points: &Tensor, k: &CameraIntrinsics, h: usize, w: usize) -> Result<WarpGrid> {
    let (b, _, _) = points.dims3()?;
    let px = points.narrow(1, 0, 1)?;
    let py = points.narrow(1, 1, 1)?;
    let pz = points.narrow(1, 2, 1)?;
    let z_ok = pz.gt(MIN_WARP_DEPTH)?;
    let pz_safe = z_ok.where_cond(&pz, &pz.ones_like()?)?;
    let u = ((px / &pz_safe)? * k.fx)? + k.cx;
    let u = u?;
    let v = (((py / &pz_safe)? * k.fy)? + k.cy)?;

    let dtype = points.dtype();
    let max_u = (k.width - 1) as f64;
    let max_v = (k.height - 1) as f64;
    let in_bounds = [u.ge(0.0)?, u.le(max_u)?, v.ge(0.0)?, v.le(max_v)?, z_ok];
    let mut valid = in_bounds[0].to_dtype(dtype)?;
    for m in &in_bounds[1..] {
        valid = (valid * m.to_dtype(dtype)?)?;
    }
    Ok(WarpGrid {
        u: u.reshape((b, 1, h, w))?,
        v: v.reshape((b, 1, h, w))?,
        valid: valid.reshape((b, 1, h, w))?,
    })
}

/// `p' ~ K T D(p) K^-1 p` for every pixel `p` of the depth map.
///
/// Evaluated in displacement form, `u' = u + fx (qx / qz - rx)` with
/// `q = R r + t / D`, which is algebraically the same projection but returns
/// the pixel lattice bit-exactly for the identity transform.
pub fn warp_grid(depth: &Tensor, pose: &PoseBatch, k: &CameraIntrinsics) -> Result<WarpGrid> {
    let (b, h, w) = check_depth_dims(depth, k)?;
    let n = h * w;
    let dtype = depth.dtype();
    let rays = pixel_rays(k, dtype)?.unsqueeze(0)?;
    let d = depth.reshape((b, 1, n))?;
    let rotated = pose
        .rotation
        .matmul(&rays.broadcast_as((b, 3, n))?.contiguous()?)?;
    let q = (rotated + pose.translation.broadcast_div(&d)?)?;
    let qx = q.narrow(1, 0, 1)?;
    let qy = q.narrow(1, 1, 1)?;
    let qz = q.narrow(1, 2, 1)?;
    let z_ok = (&qz * &d)?.gt(MIN_WARP_DEPTH)?;
    let qz_safe = z_ok.where_cond(&qz, &qz.ones_like()?)?;

    let mut lattice_u = Vec::with_capacity(n);
    let mut lattice_v = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            lattice_u.push(x as f64);
            lattice_v.push(y as f64);
        }
    }
    let lattice_u = Tensor::from_vec(lattice_u, (1, 1, n), &Device::Cpu)?.to_dtype(dtype)?;
    let lattice_v = Tensor::from_vec(lattice_v, (1, 1, n), &Device::Cpu)?.to_dtype(dtype)?;
    let rx = rays.narrow(1, 0, 1)?;
    let ry = rays.narrow(1, 1, 1)?;
    let u = lattice_u.broadcast_add(&((qx / &qz_safe)?.broadcast_sub(&rx)? * k.fx)?)?;
    let v = lattice_v.broadcast_add(&((qy / &qz_safe)?.broadcast_sub(&ry)? * k.fy)?)?;

    let max_u = (k.width - 1) as f64;
    let max_v = (k.height - 1) as f64;
    let masks = [u.ge(0.0)?, u.le(max_u)?, v.ge(0.0)?, v.le(max_v)?, z_ok];
    let mut valid = masks[0].to_dtype(dtype)?;
    for m in &masks[1..] {
        valid = (valid * m.to_dtype(dtype)?)?;
    }
    Ok(WarpGrid {
        u: u.reshape((b, 1, h, w))?,
        v: v.reshape((b, 1, h, w))?,
        valid: valid.reshape((b, 1, h, w))?,
    })
}

/// Bilinear interpolation of `image` at `grid`; invalid samples are zero.
///
/// The weights are differentiable in the grid coordinates; the integer cell
/// is chosen from the detached coordinates, so the result is
/// sub-differentiable with kinks on the integer lattice.
pub fn sample_bilinear(image: &Tensor, grid: &WarpGrid) -> Result<Tensor> {
    let (b, c, hs, ws) = image.dims4()?;
    let (gb, _, h, w) = grid.u.dims4()?;
    if gb != b {
        return Err(Error::Shape(format!("grid batch {gb} != image batch {b}")));
    }
    let dtype = image.dtype();
    let valid_mask = grid.valid.gt(0.5)?;
    let zeros = grid.u.zeros_like()?;
    let u = valid_mask.where_cond(&grid.u, &zeros)?;
    let v = valid_mask.where_cond(&grid.v, &zeros)?;

    let x0 = u.detach().floor()?.clamp(0.0, ws.saturating_sub(2) as f64)?;
    let y0 = v.detach().floor()?.clamp(0.0, hs.saturating_sub(2) as f64)?;
    let x1 = (&x0 + 1.0)?.clamp(0.0, (ws - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0.0, (hs - 1) as f64)?;
    let wx = (&u - &x0)?;
    let wy = (&v - &y0)?;
    let one_wx = (1.0 - &wx)?;
    let one_wy = (1.0 - &wy)?;

    let flat = image.reshape((b, c, hs * ws))?.contiguous()?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * ws as f64)? + xx)?
            .to_dtype(DType::F64)?
            .to_dtype(DType::U32)?
            .reshape((b, 1, h * w))?
            .broadcast_as((b, c, h * w))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((b, c, h, w))?)
    };
    let v00 = gather(&y0, &x0)?;
    let v01 = gather(&y0, &x1)?;
    let v10 = gather(&y1, &x0)?;
    let v11 = gather(&y1, &x1)?;
    let top = (v00.broadcast_mul(&one_wx)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&one_wx)? + v11.broadcast_mul(&wx)?)?;
    let out = (top.broadcast_mul(&one_wy)? + bottom.broadcast_mul(&wy)?)?;
    Ok(out.broadcast_mul(&grid.valid.to_dtype(dtype)?)?)
}

/// Warps `source` into the target view given target depth and `T_{t->s}`.
pub fn synthesize_tensor(
    source: &Tensor,
    depth_t: &Tensor,
    pose_t_to_s: &PoseBatch,
    k: &CameraIntrinsics,
) -> Result<(Tensor, WarpGrid)> {
    let grid = warp_grid(depth_t, pose_t_to_s, k)?;
    let view = sample_bilinear(source, &grid)?;
    Ok((view, grid))
}
