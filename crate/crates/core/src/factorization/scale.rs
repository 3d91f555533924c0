//! Sigmoid-to-depth mappings and the probabilistic scale regression head.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds of the relative depth map.
pub const REL_MIN: f64 = 0.01;
pub const REL_MAX: f64 = 1.0;

/// Depth range of the unfactorized network (fixed scale of 1).
pub const FIXED_MIN_DEPTH: f64 = 0.1;
pub const FIXED_MAX_DEPTH: f64 = 10.0;

/// Smallest admissible scale in meters.
pub const MIN_SCALE: f64 = 1e-3;

static SCALE_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of scale predictions raised to [`MIN_SCALE`] so far in this process.
pub fn scale_clamp_count() -> usize {
    SCALE_CLAMPS.load(Ordering::Relaxed)
}

/// Inverse-depth interpolation between `min` and `max`:
/// `1 / ((1/max)(1 - s) + (1/min) s)`.
pub fn sigmoid_to_depth_range(sigma: &Tensor, min: f64, max: f64) -> Result<Tensor> {
    let disp = ((sigma * (1.0 / min - 1.0 / max))? + 1.0 / max)?;
    Ok(disp.recip()?)
}

/// Typed version on a single value; `sigma` must lie in `[0, 1]` (the
/// endpoints give the bounds).
pub fn sigmoid_to_relative_depth(sigma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("sigmoid output {sigma} outside (0, 1)")));
    }
    Ok(1.0 / ((1.0 / REL_MAX) * (1.0 - sigma) + (1.0 / REL_MIN) * sigma))
}

/// Evenly spaced scale bin centers `k * d_max / (n_bins - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBins {
    pub d_max: f64,
    pub n_bins: usize,
}

impl Default for ScaleBins {
    fn default() -> Self {
        Self {
            d_max: 10.0,
            n_bins: 101,
        }
    }
}

impl ScaleBins {
    pub fn new(d_max: f64, n_bins: usize) -> Result<Self> {
        let b = Self { d_max, n_bins };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::Config(format!("need at least 2 scale bins, got {}", self.n_bins)));
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return Err(Error::Config(format!("d_max {} must be positive", self.d_max)));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins)
            .map(|k| k as f64 * self.d_max / (self.n_bins - 1) as f64)
            .collect()
    }

    pub fn centers_tensor(&self, dtype: candle_core::DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.centers(), self.n_bins, &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// A global scale in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFactor {
    pub value: f64,
    /// True when the raw expectation fell below [`MIN_SCALE`].
    pub clamped: bool,
}

/// Expected bin center under `softmax(logits)`, raised to [`MIN_SCALE`].
pub fn probabilistic_scale_regression(logits: &[f64], bins: &ScaleBins) -> Result<ScaleFactor> {
    bins.validate()?;
    if logits.len() != bins.n_bins {
        return Err(Error::Shape(format!("{} logits for {} bins", logits.len(), bins.n_bins)));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Domain("scale logits must be finite".into()));
    }
    let t = Tensor::from_slice(logits, (1, logits.len()), &Device::Cpu)?;
    let s = scale_from_logits(&t, bins)?.to_vec1::<f64>()?[0];
    let raw = expected_center(&t, bins)?.to_vec1::<f64>()?[0];
    Ok(ScaleFactor {
        value: s,
        clamped: raw < MIN_SCALE,
    })
}

fn expected_center(logits: &Tensor, bins: &ScaleBins) -> Result<Tensor> {
    let p = candle_nn::ops::softmax(logits, 1)?;
    let centers = bins.centers_tensor(logits.dtype())?.unsqueeze(1)?;
    Ok(p.matmul(&centers)?.squeeze(1)?)
}

/// `[B, n_bins]` logits to `[B]` scales on the autograd tape.
pub fn scale_from_logits(logits: &Tensor, bins: &ScaleBins) -> Result<Tensor> {
    let (_, n) = logits.dims2()?;
    if n != bins.n_bins {
        return Err(Error::Shape(format!("{n} logits for {} bins", bins.n_bins)));
    }
    let s = expected_center(logits, bins)?;
    let low = s.lt(MIN_SCALE)?.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if low > 0.0 {
        SCALE_CLAMPS.fetch_add(low as usize, Ordering::Relaxed);
        log::warn!("{low} scale prediction(s) below {MIN_SCALE} m raised to the floor");
    }
    Ok(s.clamp(MIN_SCALE, bins.d_max)?)
}
