//! Dense image and scalar-map containers plus their conversions to tensors.
//!
//! Storage is planar (channel-major, then row-major) `f64`. Pixel centers sit
//! at integer coordinates with the origin at the top-left pixel center.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A multi-channel image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be non-zero, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image buffer holds {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &ImageFrame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::Shape(format!(
                    "expected [C,H,W] or [1,C,H,W], got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Self::new(w, h, c, data)
    }
}

/// A single-channel `H x W` map of reals (depth, SSIM, error maps, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Per-pixel z-depth in meters.
pub type DepthMap = Map2;

impl Map2 {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "map dimensions must be non-zero, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "map buffer holds {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Map2) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rejects any value that is non-finite or `<= 0`.
    pub fn ensure_positive(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidDepth {
                    x: i % self.width,
                    y: i / self.width,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 1, self.height, self.width), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => {
                return Err(Error::Shape(format!(
                    "expected a single-channel map, got {dims:?}"
                )))
            }
        };
        let data = t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Self::new(w, h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = ImageFrame::from_fn(4, 3, 2, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let t = img.to_tensor(DType::F64).unwrap();
        assert_eq!(t.dims(), &[1, 2, 3, 4]);
        let v: f64 = t.get(0).unwrap().get(1).unwrap().get(2).unwrap().get(3).unwrap().to_scalar().unwrap();
        assert_eq!(v, 123.0);
        assert_eq!(ImageFrame::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageFrame::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Map2::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn ensure_positive_reports_pixel() {
        let mut m = Map2::filled(3, 2, 1.0);
        m.set(1, 2, -0.5);
        match m.ensure_positive() {
            Err(Error::InvalidDepth { x, y, value }) => {
                assert_eq!((x, y), (2, 1));
                assert_eq!(value, -0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        m.set(1, 2, f64::NAN);
        assert!(m.ensure_positive().is_err());
    }
}
