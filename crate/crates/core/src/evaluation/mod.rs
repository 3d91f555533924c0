//! Depth accuracy and odometry error metrics, and report rendering.

mod odometry;
mod report;

pub use odometry::{odometry_metrics, rigid_alignment, OdometryMetrics, Trajectory};
pub use report::{depth_to_rgb, format_table, render_report, viridis, DepthPanel, MetricRow, ReportFiles, ReportOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    None,
    /// Scale predictions by `median(gt) / median(pred)` over the mask.
    Median,
}

impl std::str::FromStr for Align {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "median" => Ok(Self::Median),
            _ => Err(Error::Config(format!("unknown alignment '{s}'"))),
        }
    }
}

impl std::fmt::Display for Align {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Median => "median",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Meters.
    pub rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn to_array(&self) -> [f64; 5] {
        [self.abs_rel, self.rms, self.delta1, self.delta2, self.delta3]
    }

    pub fn max_abs_diff(&self, other: &DepthMetrics) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-field mean over frames.
    pub fn mean(items: &[DepthMetrics]) -> Result<DepthMetrics> {
        if items.is_empty() {
            return Err(Error::EmptyMask);
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 5];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v / n;
            }
        }
        Ok(DepthMetrics {
            abs_rel: acc[0],
            rms: acc[1],
            delta1: acc[2],
            delta2: acc[3],
            delta3: acc[4],
        })
    }
}

/// Pixels with ground truth in `(0, d_max]`.
pub fn valid_gt_mask(gt: &DepthMap, d_max: f64) -> Vec<bool> {
    gt.data().iter().map(|&g| g > 0.0 && g <= d_max).collect()
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, align: Align, mask: &[bool]) -> Result<DepthMetrics> {
    if !pred.same_shape(gt) || mask.len() != gt.data().len() {
        return Err(Error::Shape(format!(
            "prediction {}x{}, ground truth {}x{}, mask of {}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height(),
            mask.len()
        )));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (p, g) = (pred.data(), gt.data());
    for &i in &idx {
        if !(g[i] > 0.0) || !p[i].is_finite() || !(p[i] > 0.0) {
            let (x, y) = (i % gt.width(), i / gt.width());
            let value = if g[i] > 0.0 { p[i] } else { g[i] };
            return Err(Error::InvalidDepth { x, y, value });
        }
    }
    let scale = match align {
        Align::None => 1.0,
        Align::Median => {
            let mut gs: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            let mut ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            median(&mut gs) / median(&mut ps)
        }
    };
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq, mut d) = (0.0, 0.0, [0usize; 3]);
    for &i in &idx {
        let (pi, gi) = (p[i] * scale, g[i]);
        abs_rel += (pi - gi).abs() / gi;
        sq += (pi - gi) * (pi - gi);
        let ratio = (pi / gi).max(gi / pi);
        for (k, count) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        rms: (sq / n).sqrt(),
        delta1: d[0] as f64 / n,
        delta2: d[1] as f64 / n,
        delta3: d[2] as f64 / n,
    })
}
