//! The self-supervised objective: SSIM + L1 photometric error, per-pixel
//! minimum reprojection with auto-masking, edge-aware smoothness on
//! mean-normalized inverse depth, and cross-frame depth consistency.
//!
//! Tensor functions operate on batches (`[B, C, H, W]` images, `[B, 1, H, W]`
//! depth); the typed wrappers at the bottom evaluate them on single frames in
//! `f64`.

use std::fmt;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame, Map2};
use crate::geometry::warp::{self, PoseBatch, WarpGrid};
use crate::geometry::{CameraIntrinsics, RigidTransform, MIN_WARP_DEPTH};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Stand-in error for invalid samples so they never win the per-pixel minimum.
const INVALID_ERROR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// SSIM / L1 mix in the photometric error.
    pub alpha: f64,
    /// Edge-aware smoothness weight.
    pub tau: f64,
    /// Depth consistency weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            tau: 0.001,
            gamma: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.tau >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "tau {} and gamma {} must be non-negative",
                self.tau, self.gamma
            )));
        }
        Ok(())
    }
}

/// How errors from several synthesized views are combined per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceReduction {
    /// Minimum over views (occlusion-aware).
    #[default]
    Min,
    /// Plain sum over views.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub smoothness: f64,
    pub consistency: f64,
    pub total: f64,
    pub automask_fraction: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.photometric, self.smoothness, self.consistency, self.total, self.automask_fraction]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} photometric={:.6} smoothness={:.6} consistency={:.6} automask={:.4}",
            self.total, self.photometric, self.smoothness, self.consistency, self.automask_fraction
        )
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// 3x3 box mean with edge replication, `[B, C, H, W] -> [B, C, H, W]`.
fn box3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = padded.narrow(2, dy, h)?;
        for dx in 0..3 {
            let win = rows.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => win,
                Some(a) => (a + win)?,
            });
        }
    }
    Ok((acc.expect("nine windows") / 9.0)?)
}

/// Per-pixel SSIM averaged over channels, `[B, 1, H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b)?;
    let mu_a = box3(a)?;
    let mu_b = box3(b)?;
    let var_a = (box3(&a.sqr()?)? - mu_a.sqr()?)?;
    let var_b = (box3(&b.sqr()?)? - mu_b.sqr()?)?;
    let cov = (box3(&(a * b)?)? - (&mu_a * &mu_b)?)?;
    let num = ((((&mu_a * &mu_b)? * 2.0)? + SSIM_C1)? * ((cov * 2.0)? + SSIM_C2)?)?;
    let den = (((mu_a.sqr()? + mu_b.sqr()?)? + SSIM_C1)? * ((var_a + var_b)? + SSIM_C2)?)?;
    Ok((num / den)?.mean_keepdim(1)?)
}

/// `(alpha/2)(1 - SSIM) + (1 - alpha) L1`, `[B, 1, H, W]`.
///
/// `1 - SSIM` is clamped to `[0, 2]`: rounding can push SSIM of nearly equal
/// patches above one, and a negative error would win the auto-mask
/// comparison against an exactly zero identity error.
pub fn photometric(target: &Tensor, synth: &Tensor, alpha: f64) -> Result<Tensor> {
    check_same(target, synth)?;
    let l1 = (target - synth)?.abs()?.mean_keepdim(1)?;
    let dissim = (1.0 - ssim(target, synth)?)?.clamp(0.0, 2.0)?;
    Ok(((dissim * (alpha / 2.0))? + (l1 * (1.0 - alpha))?)?)
}

/// A synthesized view and the mask of pixels whose sample was valid.
#[derive(Debug, Clone)]
pub struct SynthView {
    pub image: Tensor,
    pub valid: Tensor,
}

impl SynthView {
    pub fn new(image: Tensor, grid: &WarpGrid) -> Self {
        Self {
            image,
            valid: grid.valid.clone(),
        }
    }
}

/// Reprojection term. Returns the scalar loss and the auto-mask keep fraction.
///
/// Invalid samples are excluded before both the per-pixel reduction and the
/// auto-mask comparison. A pixel is kept when it is valid in some view and its
/// reduced synthesized error is strictly below the smallest identity error of
/// the raw sources; ties are dropped. The loss is the mean over kept pixels
/// (zero when none are kept).
pub fn reprojection(
    target: &Tensor,
    synths: &[SynthView],
    raw_sources: &[Tensor],
    alpha: f64,
    reduction: SourceReduction,
) -> Result<(Tensor, f64)> {
    if synths.is_empty() {
        return Err(Error::Domain("reprojection needs at least one synthesized view".into()));
    }
    if raw_sources.len() != synths.len() {
        return Err(Error::Shape(format!(
            "{} synthesized views but {} raw sources",
            synths.len(),
            raw_sources.len()
        )));
    }
    let dtype = target.dtype();
    let mut errors = Vec::with_capacity(synths.len());
    let mut valids = Vec::with_capacity(synths.len());
    for view in synths {
        let e = photometric(target, &view.image, alpha)?;
        let valid = view.valid.to_dtype(dtype)?;
        let invalid_fill = (e.ones_like()? * INVALID_ERROR)?;
        errors.push(valid.gt(0.5)?.where_cond(&e, &invalid_fill)?);
        valids.push(valid);
    }
    let errors = Tensor::cat(&errors, 1)?;
    let valids = Tensor::cat(&valids, 1)?;
    let any_valid = valids.max_keepdim(1)?;
    let min_error = errors.min_keepdim(1)?;
    let reduced = match reduction {
        SourceReduction::Min => min_error.clone(),
        SourceReduction::Sum => (errors.broadcast_mul(&valids)?).sum_keepdim(1)?,
    };

    let identity: Vec<Tensor> = raw_sources
        .iter()
        .map(|s| photometric(target, s, alpha))
        .collect::<Result<_>>()?;
    let identity_min = Tensor::cat(&identity, 1)?.min_keepdim(1)?;

    let keep = (min_error.detach().lt(&identity_min.detach())?.to_dtype(dtype)? * any_valid.detach())?;
    let kept = keep.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let total = keep.elem_count() as f64;
    let loss = ((reduced * &keep)?.sum_all()? / kept.max(1.0))?;
    Ok((loss, kept / total))
}

/// Edge-aware smoothness of mean-normalized inverse depth.
///
/// Sum of the means of `|dx d*| exp(-|dx I|)` and `|dy d*| exp(-|dy I|)`,
/// forward differences, image gradients averaged over channels. Scale
/// invariant in depth by construction.
pub fn smoothness(depth: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = depth.dims4()?;
    let (ib, _, ih, iw) = image.dims4()?;
    if (ib, ih, iw) != (b, h, w) {
        return Err(Error::Shape(format!("depth {:?} vs image {:?}", depth.dims(), image.dims())));
    }
    let inv = depth.recip()?;
    let mean = inv.reshape((b, ()))?.mean_keepdim(D::Minus1)?.reshape((b, 1, 1, 1))?;
    let norm = inv.broadcast_div(&mean)?;
    let mut loss = Tensor::zeros((), depth.dtype(), depth.device())?;
    if w > 1 {
        let dx = (norm.narrow(3, 1, w - 1)? - norm.narrow(3, 0, w - 1)?)?.abs()?;
        let ix = (image.narrow(3, 1, w - 1)? - image.narrow(3, 0, w - 1)?)?
            .abs()?
            .mean_keepdim(1)?;
        loss = (loss + (dx * ix.neg()?.exp()?)?.mean_all()?)?;
    }
    if h > 1 {
        let dy = (norm.narrow(2, 1, h - 1)? - norm.narrow(2, 0, h - 1)?)?.abs()?;
        let iy = (image.narrow(2, 1, h - 1)? - image.narrow(2, 0, h - 1)?)?
            .abs()?
            .mean_keepdim(1)?;
        loss = (loss + (dy * iy.neg()?.exp()?)?.mean_all()?)?;
    }
    Ok(loss)
}

/// Source depth brought into the target frame, `[B, 1, H, W]`, with validity.
///
/// Source depth is bilinearly sampled at the warped coordinates, lifted to
/// source-frame points along the sampled rays, moved back with the inverse
/// transform, and its z component read off.
pub fn warped_source_depth(
    depth_t: &Tensor,
    depth_s: &Tensor,
    pose_t_to_s: &PoseBatch,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor)> {
    check_same(depth_t, depth_s)?;
    let (b, _, h, w) = depth_t.dims4()?;
    let grid = warp::warp_grid(depth_t, pose_t_to_s, k)?;
    let sampled = warp::sample_bilinear(depth_s, &grid)?;
    let valid_mask = grid.valid.gt(0.5)?;
    let zeros = grid.u.zeros_like()?;
    let u = valid_mask.where_cond(&grid.u, &zeros)?;
    let v = valid_mask.where_cond(&grid.v, &zeros)?;
    let rx = ((u - k.cx)? / k.fx)?;
    let ry = ((v - k.cy)? / k.fy)?;
    let rays = Tensor::cat(&[rx, ry, sampled.ones_like()?], 1)?.reshape((b, 3, h * w))?;
    let points_s = rays.broadcast_mul(&sampled.reshape((b, 1, h * w))?)?;
    let back = pose_t_to_s.inverse()?.apply(&points_s)?;
    let z = back.narrow(1, 2, 1)?.reshape((b, 1, h, w))?;
    let valid = (grid.valid * z.gt(MIN_WARP_DEPTH)?.to_dtype(depth_t.dtype())?)?;
    Ok((z, valid))
}

/// Mean over valid pixels of `|D_t - D~| / (D_t + D~)`; zero if none are valid.
pub fn depth_consistency(
    depth_t: &Tensor,
    depth_s: &Tensor,
    pose_t_to_s: &PoseBatch,
    k: &CameraIntrinsics,
) -> Result<Tensor> {
    let (z, valid) = warped_source_depth(depth_t, depth_s, pose_t_to_s, k)?;
    let z = valid.gt(0.5)?.where_cond(&z, depth_t)?;
    let ratio = ((depth_t - &z)?.abs()? / (depth_t + &z)?)?;
    let count = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((ratio * valid)?.sum_all()? / count.max(1.0))?)
}

/// `L_A + tau L_s + gamma L_c` on the tape.
pub fn weighted_total(
    photometric: &Tensor,
    smoothness: &Tensor,
    consistency: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    Ok(((photometric + (smoothness * weights.tau)?)? + (consistency * weights.gamma)?)?)
}

/// Scalar version of the weighted total; fills in a [`LossBreakdown`].
pub fn total_loss(
    photometric: f64,
    smoothness: f64,
    consistency: f64,
    automask_fraction: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        photometric,
        smoothness,
        consistency,
        total: photometric + weights.tau * smoothness + weights.gamma * consistency,
        automask_fraction,
    }
}

// Typed single-frame wrappers.

fn image_pair(a: &ImageFrame, b: &ImageFrame) -> Result<(Tensor, Tensor)> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok((a.to_tensor(DType::F64)?, b.to_tensor(DType::F64)?))
}

pub fn ssim_map(a: &ImageFrame, b: &ImageFrame) -> Result<Map2> {
    let (ta, tb) = image_pair(a, b)?;
    Map2::from_tensor(&ssim(&ta, &tb)?)
}

pub fn photometric_error(target: &ImageFrame, synth: &ImageFrame, alpha: f64) -> Result<Map2> {
    let (ta, tb) = image_pair(target, synth)?;
    Map2::from_tensor(&photometric(&ta, &tb, alpha)?)
}

/// Single-frame reprojection loss; `valid` masks default to all-valid.
pub fn reprojection_loss(
    target: &ImageFrame,
    synths: &[(ImageFrame, Option<Vec<bool>>)],
    raw_sources: &[ImageFrame],
    alpha: f64,
    reduction: SourceReduction,
) -> Result<(f64, f64)> {
    let t = target.to_tensor(DType::F64)?;
    let mut views = Vec::with_capacity(synths.len());
    for (img, valid) in synths {
        let (_, ti) = image_pair(target, img)?;
        let mask: Vec<f64> = match valid {
            Some(v) if v.len() == target.width() * target.height() => {
                v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
            }
            Some(v) => return Err(Error::Shape(format!("mask has {} entries", v.len()))),
            None => vec![1.0; target.width() * target.height()],
        };
        let mask = Map2::new(target.width(), target.height(), mask)?.to_tensor(DType::F64)?;
        views.push(SynthView { image: ti, valid: mask });
    }
    let raws: Vec<Tensor> = raw_sources
        .iter()
        .map(|r| image_pair(target, r).map(|(_, tr)| tr))
        .collect::<Result<_>>()?;
    let (loss, frac) = reprojection(&t, &views, &raws, alpha, reduction)?;
    Ok((loss.to_scalar::<f64>()?, frac))
}

pub fn smoothness_loss(depth: &DepthMap, image: &ImageFrame) -> Result<f64> {
    depth.ensure_positive()?;
    if depth.width() != image.width() || depth.height() != image.height() {
        return Err(Error::Shape("depth and image sizes differ".into()));
    }
    Ok(smoothness(&depth.to_tensor(DType::F64)?, &image.to_tensor(DType::F64)?)?.to_scalar::<f64>()?)
}

pub fn depth_consistency_loss(
    depth_t: &DepthMap,
    depth_s: &DepthMap,
    t_to_s: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<f64> {
    depth_t.ensure_positive()?;
    depth_s.ensure_positive()?;
    let pose = PoseBatch::from_transforms(&[*t_to_s], DType::F64)?;
    Ok(depth_consistency(
        &depth_t.to_tensor(DType::F64)?,
        &depth_s.to_tensor(DType::F64)?,
        &pose,
        k,
    )?
    .to_scalar::<f64>()?)
}
