//! Residual convolutional encoder shared by the depth, scale and pose branches.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, Conv2d, ConvSpec, ParamStore};

/// Channel widths of every network in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetWidths {
    /// Encoder stages at 1/2, 1/4, 1/8 and 1/16 resolution.
    pub encoder: [usize; 4],
    /// Encoder head at 1/32 resolution; input to attention and pose heads.
    pub head: usize,
    /// Decoder levels from full resolution up to 1/16.
    pub decoder: [usize; 5],
    /// Channels of the second and third scale-regressor blocks.
    pub scale: usize,
    /// Hidden fully-connected width of the scale regressor.
    pub fc: usize,
    /// Hidden width of each pose head.
    pub pose: usize,
}

impl Default for NetWidths {
    fn default() -> Self {
        Self {
            encoder: [32, 64, 128, 256],
            head: 512,
            decoder: [16, 32, 64, 128, 256],
            scale: 1024,
            fc: 1024,
            pose: 256,
        }
    }
}

impl NetWidths {
    /// Narrow profile for single-core CPU runs.
    pub fn desk() -> Self {
        Self {
            encoder: [16, 24, 32, 64],
            head: 64,
            decoder: [8, 16, 24, 32, 64],
            scale: 128,
            fc: 128,
            pose: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .encoder
            .into_iter()
            .chain(self.decoder)
            .chain([self.head, self.scale, self.fc, self.pose]);
        for w in all {
            if w == 0 {
                return Err(Error::Config("network widths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean and spread used to standardize `[0, 1]` images before the encoder.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.225;

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(ps, &format!("{name}.a"), c, c, ConvSpec::k3())?,
            b: Conv2d::new(ps, &format!("{name}.b"), c, c, ConvSpec::k3())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&relu(&self.a.forward(x)?)?)?;
        relu(&(x + y)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    block: ResBlock,
}

/// Feature pyramid: four stages at 1/2 .. 1/16 plus a head at 1/32.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<Stage>,
    head: Conv2d,
    in_channels: usize,
}

/// Encoder outputs from finest to coarsest; the last entry is the head.
#[derive(Debug, Clone)]
pub struct Features {
    pub levels: Vec<Tensor>,
}

impl Features {
    pub fn head(&self) -> &Tensor {
        self.levels.last().expect("encoder produces levels")
    }
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, widths: &NetWidths) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = in_channels;
        for (i, &c) in widths.encoder.iter().enumerate() {
            stages.push(Stage {
                down: Conv2d::new(ps, &format!("{name}.stage{i}.down"), c_in, c, ConvSpec::k3().stride(2))?,
                block: ResBlock::new(ps, &format!("{name}.stage{i}.res"), c)?,
            });
            c_in = c;
        }
        let head = Conv2d::new(ps, &format!("{name}.head"), c_in, widths.head, ConvSpec::k3().stride(2))?;
        Ok(Self {
            stages,
            head,
            in_channels,
        })
    }

    /// `x` holds `[0, 1]` images, `[B, in_channels, H, W]` with `H`, `W`
    /// divisible by 32.
    pub fn forward(&self, x: &Tensor) -> Result<Features> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("encoder expects {} channels, got {c}", self.in_channels)));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!("image size {w}x{h} must be divisible by 32")));
        }
        let mut x = ((x - INPUT_MEAN)? / INPUT_STD)?;
        let mut levels = Vec::with_capacity(5);
        for s in &self.stages {
            x = s.block.forward(&relu(&s.down.forward(&x)?)?)?;
            levels.push(x.clone());
        }
        levels.push(relu(&self.head.forward(&x)?)?);
        Ok(Features { levels })
    }
}
