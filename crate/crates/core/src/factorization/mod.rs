//! Depth factorization: a bounded relative depth map from an encoder-decoder,
//! times one global scale per image from an attention-guided regressor over
//! discretized scale bins.

mod attention;
mod scale;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use attention::{self_attention, AttentionParams};
pub use scale::{
    probabilistic_scale_regression, scale_clamp_count, scale_from_logits, sigmoid_to_depth_range,
    sigmoid_to_relative_depth, ScaleBins, ScaleFactor, FIXED_MAX_DEPTH, FIXED_MIN_DEPTH, MIN_SCALE, REL_MAX,
    REL_MIN,
};

use crate::encoder::{Encoder, Features, NetWidths};
use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame, Map2};
use crate::nn::{elu, global_avg_pool, relu, sigmoid, upsample2, Conv2d, ConvSpec, ForwardCtx, Linear, Padding, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub widths: NetWidths,
    pub bins: ScaleBins,
    /// When false the decoder output maps straight to `(0.1, 10)` m and the
    /// scale is fixed at 1.
    pub factorization: bool,
    pub dropout: f64,
    /// Metric depth the untrained network predicts everywhere, in meters.
    pub prior_depth: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self {
            widths: NetWidths::default(),
            bins: ScaleBins::default(),
            factorization: true,
            dropout: 0.5,
            prior_depth: 2.5,
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.widths.validate()?;
        self.bins.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        let (lo, hi) = self.prior_range();
        if !(self.prior_depth > lo && self.prior_depth < hi) {
            return Err(Error::Config(format!(
                "prior_depth {} outside the representable range ({lo}, {hi})",
                self.prior_depth
            )));
        }
        Ok(())
    }

    fn prior_range(&self) -> (f64, f64) {
        if self.factorization {
            let s0 = self.bins.d_max / 2.0;
            (REL_MIN * s0, REL_MAX * s0)
        } else {
            (FIXED_MIN_DEPTH, FIXED_MAX_DEPTH)
        }
    }

    /// Pre-sigmoid value that reproduces `prior_depth` at initialization.
    fn prior_logit(&self) -> f64 {
        let (d, lo, hi) = if self.factorization {
            (self.prior_depth / (self.bins.d_max / 2.0), REL_MIN, REL_MAX)
        } else {
            (self.prior_depth, FIXED_MIN_DEPTH, FIXED_MAX_DEPTH)
        };
        let sigma = (1.0 / d - 1.0 / hi) / (1.0 / lo - 1.0 / hi);
        (sigma / (1.0 - sigma)).ln()
    }
}

/// Skip-connected decoder emitting one sigmoid map at input resolution.
#[derive(Debug, Clone)]
struct Decoder {
    up0: Vec<Conv2d>,
    up1: Vec<Conv2d>,
    disp: Conv2d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, name: &str, widths: &NetWidths) -> Result<Self> {
        let spec = ConvSpec::k3().padding(Padding::Replicate);
        let skip = |i: usize| if i == 0 { 0 } else { widths.encoder[i - 1] };
        let mut up0 = Vec::with_capacity(5);
        let mut up1 = Vec::with_capacity(5);
        let mut c_in = widths.head;
        for i in (0..5).rev() {
            let c = widths.decoder[i];
            up0.push(Conv2d::new(ps, &format!("{name}.up{i}.0"), c_in, c, spec)?);
            up1.push(Conv2d::new(ps, &format!("{name}.up{i}.1"), c + skip(i), c, spec)?);
            c_in = c;
        }
        let disp = Conv2d::new(ps, &format!("{name}.disp"), widths.decoder[0], 1, spec)?;
        Ok(Self { up0, up1, disp })
    }

    /// Pre-sigmoid map `[B, 1, H, W]`.
    fn forward(&self, f: &Features) -> Result<Tensor> {
        let mut x = f.head().clone();
        for (j, i) in (0..5).rev().enumerate() {
            x = upsample2(&elu(&self.up0[j].forward(&x)?)?)?;
            if i > 0 {
                x = Tensor::cat(&[&x, &f.levels[i - 1]], 1)?;
            }
            x = elu(&self.up1[j].forward(&x)?)?;
        }
        self.disp.forward(&x)
    }
}

/// Attention block, two residual conv blocks around a strided projection,
/// global pooling and three fully-connected layers.
#[derive(Debug, Clone)]
struct ScaleNet {
    attention: AttentionParams,
    block1: [Conv2d; 2],
    project: Conv2d,
    block3: [Conv2d; 2],
    fc: [Linear; 3],
    dropout: f64,
}

impl ScaleNet {
    fn new(ps: &mut ParamStore, name: &str, widths: &NetWidths, bins: &ScaleBins, dropout: f64) -> Result<Self> {
        let c = widths.head;
        let s = widths.scale;
        Ok(Self {
            attention: AttentionParams::new(ps, &format!("{name}.attention"), c)?,
            block1: [
                Conv2d::new(ps, &format!("{name}.block1.0"), c, c, ConvSpec::k3())?,
                Conv2d::new(ps, &format!("{name}.block1.1"), c, c, ConvSpec::k3())?,
            ],
            project: Conv2d::new(ps, &format!("{name}.block2"), c, s, ConvSpec::k1().stride(2))?,
            block3: [
                Conv2d::new(ps, &format!("{name}.block3.0"), s, s, ConvSpec::k3())?,
                Conv2d::new(ps, &format!("{name}.block3.1"), s, s, ConvSpec::k3())?,
            ],
            fc: [
                Linear::new(ps, &format!("{name}.fc1"), s, widths.fc, false)?,
                Linear::new(ps, &format!("{name}.fc2"), widths.fc, widths.fc, false)?,
                Linear::new(ps, &format!("{name}.fc3"), widths.fc, bins.n_bins, true)?,
            ],
            dropout,
        })
    }

    /// Scale logits `[B, n_bins]`.
    fn forward(&self, head: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let x = self_attention(head, &self.attention)?;
        let y = self.block1[1].forward(&relu(&self.block1[0].forward(&x)?)?)?;
        let x = relu(&(x + y)?)?;
        let x = relu(&self.project.forward(&x)?)?;
        let y = self.block3[1].forward(&relu(&self.block3[0].forward(&x)?)?)?;
        let x = relu(&(x + y)?)?;
        let v = global_avg_pool(&x)?;
        let v = ctx.dropout(&relu(&self.fc[0].forward(&v)?)?, self.dropout)?;
        let v = ctx.dropout(&relu(&self.fc[1].forward(&v)?)?, self.dropout)?;
        self.fc[2].forward(&v)
    }
}

/// Outputs of one depth forward pass on a batch.
#[derive(Debug, Clone)]
pub struct DepthOutput {
    /// `[B, 1, H, W]` sigmoid activations.
    pub sigma: Tensor,
    /// `[B, 1, H, W]` relative depth (equal to `metric` without factorization).
    pub relative: Tensor,
    /// `[B]` global scales in meters (ones without factorization).
    pub scale: Tensor,
    /// `[B, 1, H, W]` metric depth in meters.
    pub metric: Tensor,
    /// `[B, n_bins]` scale logits, when factorized.
    pub logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DepthNet {
    config: DepthNetConfig,
    encoder: Encoder,
    decoder: Decoder,
    scale: Option<ScaleNet>,
}

impl DepthNet {
    pub fn new(ps: &mut ParamStore, name: &str, config: &DepthNetConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(ps, &format!("{name}.encoder"), 3, &config.widths)?;
        let decoder = Decoder::new(ps, &format!("{name}.decoder"), &config.widths)?;
        decoder.disp.set_bias(config.prior_logit())?;
        let scale = if config.factorization {
            Some(ScaleNet::new(
                ps,
                &format!("{name}.scale"),
                &config.widths,
                &config.bins,
                config.dropout,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            scale,
        })
    }

    pub fn config(&self) -> &DepthNetConfig {
        &self.config
    }

    /// `images`: `[B, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor, ctx: &mut ForwardCtx) -> Result<DepthOutput> {
        let b = images.dim(0)?;
        let features = self.encoder.forward(images)?;
        let sigma = sigmoid(&self.decoder.forward(&features)?)?;
        match &self.scale {
            Some(net) => {
                let relative = sigmoid_to_depth_range(&sigma, REL_MIN, REL_MAX)?;
                let logits = net.forward(features.head(), ctx)?;
                let scale = scale_from_logits(&logits, &self.config.bins)?;
                let metric = compose_metric(&relative, &scale)?;
                Ok(DepthOutput {
                    sigma,
                    relative,
                    scale,
                    metric,
                    logits: Some(logits),
                })
            }
            None => {
                let metric = sigmoid_to_depth_range(&sigma, FIXED_MIN_DEPTH, FIXED_MAX_DEPTH)?;
                Ok(DepthOutput {
                    sigma,
                    relative: metric.clone(),
                    scale: Tensor::ones(b, images.dtype(), images.device())?,
                    metric,
                    logits: None,
                })
            }
        }
    }
}

/// `metric[b] = scale[b] * relative[b]`.
pub fn compose_metric(relative: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let b = scale.dim(0)?;
    Ok(relative.broadcast_mul(&scale.reshape((b, 1, 1, 1))?)?)
}

/// A single-image prediction split into relative depth and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedDepth {
    pub relative: Map2,
    pub scale: f64,
    pub metric: DepthMap,
}

impl FactorizedDepth {
    /// Builds the product `scale * relative`.
    pub fn compose(relative: Map2, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!("scale {scale} must be positive")));
        }
        let metric = relative.map(|r| r * scale);
        Ok(Self {
            relative,
            scale,
            metric,
        })
    }
}

/// Deterministic (dropout off) single-image inference.
pub fn predict_depth(image: &ImageFrame, net: &DepthNet, dtype: DType) -> Result<FactorizedDepth> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {} channels", image.channels())));
    }
    let out = net.forward(&image.to_tensor(dtype)?, &mut ForwardCtx::eval())?;
    let relative = Map2::from_tensor(&out.relative)?;
    let scale = out.scale.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
    let metric = Map2::from_tensor(&out.metric)?;
    Ok(FactorizedDepth {
        relative,
        scale,
        metric,
    })
}
