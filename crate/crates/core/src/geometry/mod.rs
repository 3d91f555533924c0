//! Camera geometry: intrinsics, rigid transforms, backprojection, projective
//! warping and bilinear sampling.
//!
//! The typed functions in this module (`backproject`, `warp_coordinates`,
//! `bilinear_sample`, `synthesize_view`) run the same tensor code as training
//! (see [`warp`]) in `f64`.
//!
//! Conventions: pixel centers at integer coordinates with the origin at the
//! top-left pixel center; samples outside `[0, W-1] x [0, H-1]` or behind the
//! camera (`z <= 1e-6` m) are flagged invalid and read as zero.

mod camera;
mod transform;
pub mod warp;

use candle_core::{DType, Device, Tensor};

pub use camera::CameraIntrinsics;
pub use transform::{compose, invert, pose_vector_to_transform, rodrigues, PoseVector, RigidTransform};
pub use warp::{PoseBatch, WarpGrid, MIN_WARP_DEPTH};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame};

/// Camera-frame 3D points, one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 3]>,
}

impl PointMap {
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        self.points[y * self.width + x]
    }
}

/// Per-pixel source-image sampling coordinates plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl SamplingGrid {
    /// The identity lattice, every sample valid.
    pub fn lattice(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        Self {
            width,
            height,
            coords,
            valid: vec![true; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> ([f64; 2], bool) {
        let i = y * self.width + x;
        (self.coords[i], self.valid[i])
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    pub fn to_warp_grid(&self, dtype: DType) -> Result<WarpGrid> {
        let shape = (1, 1, self.height, self.width);
        let u: Vec<f64> = self.coords.iter().map(|c| c[0]).collect();
        let v: Vec<f64> = self.coords.iter().map(|c| c[1]).collect();
        let valid: Vec<f64> = self.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(WarpGrid {
            u: Tensor::from_vec(u, shape, &Device::Cpu)?.to_dtype(dtype)?,
            v: Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?,
            valid: Tensor::from_vec(valid, shape, &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    /// Reads the first batch item of a tensor grid.
    pub fn from_warp_grid(grid: &WarpGrid) -> Result<Self> {
        let (_, _, h, w) = grid.u.dims4()?;
        let take = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(0)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let u = take(&grid.u)?;
        let v = take(&grid.v)?;
        let valid = take(&grid.valid)?;
        Ok(Self {
            width: w,
            height: h,
            coords: u.iter().zip(&v).map(|(&a, &b)| [a, b]).collect(),
            valid: valid.iter().map(|&m| m > 0.5).collect(),
        })
    }
}

fn check_depth(depth: &DepthMap, k: &CameraIntrinsics) -> Result<()> {
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::Shape(format!(
            "depth is {}x{}, camera is {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    depth.ensure_positive()
}

/// `points[v, u] = depth[v, u] * ((u - cx)/fx, (v - cy)/fy, 1)`.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Result<PointMap> {
    check_depth(depth, k)?;
    let pts = warp::backproject_tensor(&depth.to_tensor(DType::F64)?, k)?
        .squeeze(0)?
        .to_vec2::<f64>()?;
    let n = k.width * k.height;
    Ok(PointMap {
        width: k.width,
        height: k.height,
        points: (0..n).map(|i| [pts[0][i], pts[1][i], pts[2][i]]).collect(),
    })
}

/// Source-image coordinates of every target pixel under `t` (target to source).
pub fn warp_coordinates(depth: &DepthMap, t: &RigidTransform, k: &CameraIntrinsics) -> Result<SamplingGrid> {
    check_depth(depth, k)?;
    let pose = PoseBatch::from_transforms(&[*t], DType::F64)?;
    let grid = warp::warp_grid(&depth.to_tensor(DType::F64)?, &pose, k)?;
    SamplingGrid::from_warp_grid(&grid)
}

pub fn bilinear_sample(image: &ImageFrame, grid: &SamplingGrid) -> Result<ImageFrame> {
    let out = warp::sample_bilinear(&image.to_tensor(DType::F64)?, &grid.to_warp_grid(DType::F64)?)?;
    ImageFrame::from_tensor(&out)
}

/// Returns the source image resampled into the target view and the grid used.
pub fn synthesize_view(
    source: &ImageFrame,
    depth_t: &DepthMap,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(ImageFrame, SamplingGrid)> {
    if source.width() != k.width || source.height() != k.height {
        return Err(Error::Shape(format!(
            "source is {}x{}, camera is {}x{}",
            source.width(),
            source.height(),
            k.width,
            k.height
        )));
    }
    let grid = warp_coordinates(depth_t, t, k)?;
    let view = bilinear_sample(source, &grid)?;
    Ok((view, grid))
}
