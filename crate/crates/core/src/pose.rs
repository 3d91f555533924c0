//! Relative camera motion from image pairs, refined by residual estimates on
//! successively re-synthesized views.
//!
//! Pose estimators return the motion of the source camera with respect to the
//! target (`T_{s->t}`); warping the source into the target view uses the
//! inverse. After `n` refinements the final estimate is
//! `T_n ∘ ... ∘ T_1 ∘ T_0`: each residual is measured on a view that already
//! reflects the previous estimates, so it composes on the left.

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::encoder::{Encoder, NetWidths};
use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame};
use crate::geometry::warp::{self, PoseBatch};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::losses;
use crate::nn::{relu, Conv2d, ConvSpec, ForwardCtx, ParamStore};

/// Rotation outputs are multiplied by this before the exponential map;
/// translations are used as predicted.
pub const ROTATION_OUTPUT_SCALE: f64 = 0.01;

/// Anything that predicts initial and residual poses on batched images.
pub trait PoseEstimator {
    /// `T_{s->t}` from `[B, 3, H, W]` target and source images.
    fn initial(&self, target: &Tensor, source: &Tensor, ctx: &mut ForwardCtx) -> Result<PoseBatch>;

    /// Residual motion of a synthesized view with respect to the target.
    fn residual(&self, target: &Tensor, synth: &Tensor, ctx: &mut ForwardCtx) -> Result<PoseBatch>;
}

/// Squeeze, two 3x3 convolutions and a zero-initialized 6-channel output,
/// averaged over space.
#[derive(Debug, Clone)]
struct PoseHead {
    squeeze: Conv2d,
    conv: [Conv2d; 2],
    out: Conv2d,
}

impl PoseHead {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Conv2d::new(ps, &format!("{name}.squeeze"), c_in, width, ConvSpec::k1())?,
            conv: [
                Conv2d::new(ps, &format!("{name}.conv0"), width, width, ConvSpec::k3())?,
                Conv2d::new(ps, &format!("{name}.conv1"), width, width, ConvSpec::k3())?,
            ],
            out: Conv2d::new(ps, &format!("{name}.out"), width, 6, ConvSpec::k1().zero_init())?,
        })
    }

    fn forward(&self, head: &Tensor) -> Result<Tensor> {
        let x = relu(&self.squeeze.forward(head)?)?;
        let x = relu(&self.conv[0].forward(&x)?)?;
        let x = relu(&self.conv[1].forward(&x)?)?;
        let x = self.out.forward(&x)?;
        let (b, c, _, _) = x.dims4()?;
        let v = x.reshape((b, c, ()))?.mean(2)?;
        Ok(Tensor::cat(&[&(v.narrow(1, 0, 3)? * ROTATION_OUTPUT_SCALE)?, &v.narrow(1, 3, 3)?], 1)?)
    }
}

/// Keeps rotation vectors strictly inside the ball of radius pi while acting
/// as the identity to first order: `w -> w * pi tanh(|w| / pi) / |w|`.
pub fn bound_rotation(v: &Tensor) -> Result<Tensor> {
    let w = v.narrow(1, 0, 3)?;
    let t = v.narrow(1, 3, 3)?;
    let norm = (w.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?;
    let pi = std::f64::consts::PI;
    let factor = (((&norm / pi)?.tanh()? * pi)? / &norm)?;
    Ok(Tensor::cat(&[&w.broadcast_mul(&factor)?, &t], 1)?)
}

/// Shared six-channel encoder with independent initial and residual heads.
#[derive(Debug, Clone)]
pub struct PoseNet {
    encoder: Encoder,
    initial_head: PoseHead,
    residual_head: PoseHead,
}

impl PoseNet {
    pub fn new(ps: &mut ParamStore, name: &str, widths: &NetWidths) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(ps, &format!("{name}.encoder"), 6, widths)?,
            initial_head: PoseHead::new(ps, &format!("{name}.initial"), widths.head, widths.pose)?,
            residual_head: PoseHead::new(ps, &format!("{name}.residual"), widths.head, widths.pose)?,
        })
    }

    fn run(&self, head: &PoseHead, a: &Tensor, b: &Tensor) -> Result<PoseBatch> {
        let pair = Tensor::cat(&[a, b], 1)?;
        let f = self.encoder.forward(&pair)?;
        let v = bound_rotation(&head.forward(f.head())?)?;
        PoseBatch::from_pose_vectors(&v)
    }
}

impl PoseEstimator for PoseNet {
    fn initial(&self, target: &Tensor, source: &Tensor, _ctx: &mut ForwardCtx) -> Result<PoseBatch> {
        self.run(&self.initial_head, target, source)
    }

    fn residual(&self, target: &Tensor, synth: &Tensor, _ctx: &mut ForwardCtx) -> Result<PoseBatch> {
        self.run(&self.residual_head, target, synth)
    }
}

/// Every intermediate of one iterative pose estimate.
#[derive(Debug, Clone)]
pub struct PoseTrace {
    pub initial: PoseBatch,
    pub residuals: Vec<PoseBatch>,
    /// View `i` is the source after `i + 1` warps.
    pub views: Vec<Tensor>,
    /// Validity of each view (all warps sampled inside the image).
    pub valid: Vec<Tensor>,
    /// `T_{s->t}` after all refinements.
    pub final_pose: PoseBatch,
}

impl PoseTrace {
    /// `T_{t->s}`, the transform the losses warp with.
    pub fn target_to_source(&self) -> Result<PoseBatch> {
        self.final_pose.inverse()
    }
}

/// Runs the initial estimate and `n_iters` residual refinements.
pub fn iterative_pose(
    estimator: &dyn PoseEstimator,
    target: &Tensor,
    source: &Tensor,
    depth_t: &Tensor,
    k: &CameraIntrinsics,
    n_iters: usize,
    ctx: &mut ForwardCtx,
) -> Result<PoseTrace> {
    let initial = estimator.initial(target, source, ctx)?;
    let (view, grid) = warp::synthesize_tensor(source, depth_t, &initial.inverse()?, k)?;
    let mut views = vec![view];
    let mut valid = vec![grid.valid];
    let mut residuals = Vec::with_capacity(n_iters);
    let mut final_pose = initial.clone();
    for _ in 0..n_iters {
        let prev = views.last().expect("at least one view");
        let step = estimator.residual(target, prev, ctx)?;
        let (view, grid) = warp::synthesize_tensor(prev, depth_t, &step.inverse()?, k)?;
        let carried = warp::sample_bilinear(&valid.last().expect("mask per view").detach(), &grid)?;
        let mask = (carried.ge(1.0 - 1e-9)?.to_dtype(grid.valid.dtype())? * &grid.valid)?;
        final_pose = step.compose(&final_pose)?;
        residuals.push(step);
        views.push(view);
        valid.push(mask);
    }
    Ok(PoseTrace {
        initial,
        residuals,
        views,
        valid,
        final_pose,
    })
}

/// Explicit product `T_n ∘ ... ∘ T_1 ∘ T_0` of typed transforms.
pub fn compose_chain(initial: &RigidTransform, residuals: &[RigidTransform]) -> RigidTransform {
    residuals.iter().fold(*initial, |acc, r| r.compose(&acc))
}

/// Fixed initial pose; residuals fitted by direct optimization of the
/// photometric error of the next view. A reference for the refinement
/// mechanism, independent of any network.
#[derive(Debug, Clone)]
pub struct OracleFit {
    pub initial: RigidTransform,
    pub depth: Tensor,
    pub k: CameraIntrinsics,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
}

impl OracleFit {
    pub fn new(initial: RigidTransform, depth: &DepthMap, k: CameraIntrinsics) -> Result<Self> {
        Ok(Self {
            initial,
            depth: depth.to_tensor(DType::F64)?,
            k,
            steps: 200,
            learning_rate: 2e-3,
            alpha: 0.85,
        })
    }

    fn view_error(&self, target: &Tensor, synth: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let step = PoseBatch::from_pose_vectors(v)?;
        let (view, grid) = warp::synthesize_tensor(synth, &self.depth, &step.inverse()?, &self.k)?;
        let err = losses::photometric(target, &view, self.alpha)?;
        let n = grid.valid.sum_all()?.to_scalar::<f64>()?.max(1.0);
        Ok(((err * &grid.valid)?.sum_all()? / n)?.to_dtype(DType::F64).map(|e| (e, view))?)
    }
}

impl PoseEstimator for OracleFit {
    fn initial(&self, _target: &Tensor, _source: &Tensor, _ctx: &mut ForwardCtx) -> Result<PoseBatch> {
        PoseBatch::from_transforms(&[self.initial], DType::F64)
    }

    /// Adam on the six pose parameters; returns the best iterate seen,
    /// including the identity starting point.
    fn residual(&self, target: &Tensor, synth: &Tensor, _ctx: &mut ForwardCtx) -> Result<PoseBatch> {
        if target.dim(0)? != 1 {
            return Err(Error::Shape("oracle fit works on single pairs".into()));
        }
        let target = target.to_dtype(DType::F64)?.detach();
        let synth = synth.to_dtype(DType::F64)?.detach();
        let v = Var::zeros((1, 6), DType::F64, target.device())?;
        let mut opt = AdamW::new(
            vec![v.clone()],
            ParamsAdamW {
                lr: self.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut best = (f64::INFINITY, v.as_tensor().detach());
        for _ in 0..=self.steps {
            let (err, _) = self.view_error(&target, &synth, v.as_tensor())?;
            let e = err.to_scalar::<f64>()?;
            if e < best.0 {
                best = (e, v.as_tensor().detach().copy()?);
            }
            opt.backward_step(&err)?;
        }
        PoseBatch::from_pose_vectors(&best.1)
    }
}

/// Typed iterative estimate for a single pair with a known target depth.
#[derive(Debug, Clone)]
pub struct PoseIterationTrace {
    pub initial: RigidTransform,
    pub residuals: Vec<RigidTransform>,
    pub synth_views: Vec<ImageFrame>,
    pub final_pose: RigidTransform,
}

pub fn iterative_pose_typed(
    estimator: &dyn PoseEstimator,
    target: &ImageFrame,
    source: &ImageFrame,
    depth_t: &DepthMap,
    k: &CameraIntrinsics,
    n_iters: usize,
) -> Result<PoseIterationTrace> {
    depth_t.ensure_positive()?;
    let trace = iterative_pose(
        estimator,
        &target.to_tensor(DType::F64)?,
        &source.to_tensor(DType::F64)?,
        &depth_t.to_tensor(DType::F64)?,
        k,
        n_iters,
        &mut ForwardCtx::eval(),
    )?;
    let first = |p: &PoseBatch| -> Result<RigidTransform> { Ok(p.to_transforms()?[0]) };
    Ok(PoseIterationTrace {
        initial: first(&trace.initial)?,
        residuals: trace.residuals.iter().map(first).collect::<Result<_>>()?,
        synth_views: trace.views.iter().map(ImageFrame::from_tensor).collect::<Result<_>>()?,
        final_pose: first(&trace.final_pose)?,
    })
}
