use std::fmt;
use std::path::PathBuf;

use crate::data::SyntheticSceneConfig;
use crate::encoder::NetWidths;
use crate::error::{Error, Result};
use crate::factorization::{DepthNetConfig, ScaleBins};
use crate::kv;
use crate::losses::LossWeights;

/// Named channel-width presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthProfile {
    /// Full widths (ResNet-18-like encoder, 1024-wide scale regressor).
    Full,
    /// Narrow networks for single-core CPU runs.
    Desk,
    /// Very small networks for unit tests.
    Tiny,
}

impl WidthProfile {
    pub fn widths(&self) -> NetWidths {
        match self {
            Self::Full => NetWidths::default(),
            Self::Desk => NetWidths::desk(),
            Self::Tiny => NetWidths {
                encoder: [4, 8, 8, 16],
                head: 16,
                decoder: [4, 4, 8, 8, 16],
                scale: 16,
                fc: 16,
                pose: 8,
            },
        }
    }
}

impl std::str::FromStr for WidthProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(format!("unknown width profile '{s}'"))),
        }
    }
}

impl fmt::Display for WidthProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Desk => "desk",
            Self::Tiny => "tiny",
        })
    }
}

/// Where training frames come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_drop_epoch: usize,
    pub lr_final: f64,
    pub batch_size: usize,
    pub n_residual_iters: usize,
    pub weights: LossWeights,
    pub bins: ScaleBins,
    pub seed: u64,
    pub data: DataSource,
    /// Scene rendered when `data` is synthetic.
    pub scene: SyntheticSceneConfig,
    /// Keep every n-th frame of a directory sequence.
    pub data_stride: usize,
    /// Every n-th sample (by target index) is held out; 0 holds out nothing.
    pub holdout_every: usize,
    /// Save a checkpoint every n epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub widths: WidthProfile,
    pub factorization: bool,
    pub residual_pose: bool,
    pub dropout: f64,
    pub prior_depth: f64,
    /// Random horizontal flips of whole snippets.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr_initial: 1e-4,
            lr_drop_epoch: 20,
            lr_final: 1e-5,
            batch_size: 4,
            n_residual_iters: 1,
            weights: LossWeights::default(),
            bins: ScaleBins::default(),
            seed: 0,
            data: DataSource::Synthetic,
            scene: SyntheticSceneConfig::default(),
            data_stride: 1,
            holdout_every: 5,
            checkpoint_every: 0,
            max_steps: None,
            widths: WidthProfile::Desk,
            factorization: true,
            residual_pose: true,
            dropout: 0.5,
            prior_depth: 2.5,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.lr_drop_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "need lr_drop_epoch ({}) < epochs ({})",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.data_stride == 0 {
            return Err(Error::Config("batch_size and data_stride must be positive".into()));
        }
        if self.n_residual_iters > 4 {
            return Err(Error::Config("n_residual_iters must be between 0 and 4".into()));
        }
        self.weights.validate()?;
        self.depth_config().validate()?;
        if self.data == DataSource::Synthetic {
            self.scene.validate()?;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    /// Residual refinements actually run (zero when the toggle is off).
    pub fn effective_iters(&self) -> usize {
        if self.residual_pose {
            self.n_residual_iters
        } else {
            0
        }
    }

    pub fn depth_config(&self) -> DepthNetConfig {
        DepthNetConfig {
            widths: self.widths.widths(),
            bins: self.bins,
            factorization: self.factorization,
            dropout: self.dropout,
            prior_depth: self.prior_depth,
        }
    }

    /// Applies one setting; scene settings use the `scene.` prefix.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("scene.") {
            return self.scene.set(rest, v);
        }
        match key {
            "epochs" => self.epochs = kv::value(key, v)?,
            "lr_initial" => self.lr_initial = kv::value(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = kv::value(key, v)?,
            "lr_final" => self.lr_final = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "n_residual_iters" => self.n_residual_iters = kv::value(key, v)?,
            "alpha" => self.weights.alpha = kv::value(key, v)?,
            "tau" => self.weights.tau = kv::value(key, v)?,
            "gamma" => self.weights.gamma = kv::value(key, v)?,
            "d_max" => self.bins.d_max = kv::value(key, v)?,
            "n_bins" => self.bins.n_bins = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    p => DataSource::Directory(PathBuf::from(p)),
                }
            }
            "data_stride" => self.data_stride = kv::value(key, v)?,
            "holdout_every" => self.holdout_every = kv::value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = kv::value(key, v)?,
            "max_steps" => {
                self.max_steps = match v {
                    "none" => None,
                    _ => Some(kv::value(key, v)?),
                }
            }
            "widths" => self.widths = v.parse()?,
            "factorization" => self.factorization = kv::flag(key, v)?,
            "residual_pose" => self.residual_pose = kv::flag(key, v)?,
            "dropout" => self.dropout = kv::value(key, v)?,
            "prior_depth" => self.prior_depth = kv::value(key, v)?,
            "augment" => self.augment = kv::flag(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("epochs", self.epochs.to_string()),
            ("lr_initial", self.lr_initial.to_string()),
            ("lr_drop_epoch", self.lr_drop_epoch.to_string()),
            ("lr_final", self.lr_final.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_residual_iters", self.n_residual_iters.to_string()),
            ("alpha", self.weights.alpha.to_string()),
            ("tau", self.weights.tau.to_string()),
            ("gamma", self.weights.gamma.to_string()),
            ("d_max", self.bins.d_max.to_string()),
            ("n_bins", self.bins.n_bins.to_string()),
            ("seed", self.seed.to_string()),
            ("data", self.data.to_string()),
            ("data_stride", self.data_stride.to_string()),
            ("holdout_every", self.holdout_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string())),
            ("widths", self.widths.to_string()),
            ("factorization", self.factorization.to_string()),
            ("residual_pose", self.residual_pose.to_string()),
            ("dropout", self.dropout.to_string()),
            ("prior_depth", self.prior_depth.to_string()),
            ("augment", self.augment.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(self.scene.to_kv().into_iter().map(|(k, v)| (format!("scene.{k}"), v)));
        out
    }
}

/// Renders as the flat `key = value` text it can be parsed back from.
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
