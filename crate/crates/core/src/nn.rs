//! Minimal layer toolkit on top of candle: a seeded parameter store, 2D
//! convolutions, linear layers and dropout with reproducible masks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors created from one seeded generator.
///
/// Creation order fixes the random draws, so building the same architecture
/// with the same seed yields bit-identical parameters.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Writes every parameter into a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites parameters in place from a safetensors file; names and
    /// shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)?;
        if loaded.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} tensors, model has {}",
                path.display(),
                loaded.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies all parameter values (for bit-exact comparisons).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let vals = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), vals))
            })
            .collect()
    }
}

/// Whether dropout is active, plus the generator its masks are drawn from.
#[derive(Debug)]
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        if p >= 1.0 {
            return Ok(x.zeros_like()?);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding ("valid" convolution).
    None,
    /// Zero padding of `k / 2` on each side.
    Zero,
    /// Edge replication of `k / 2` on each side.
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
    pub zero_init: bool,
}

impl ConvSpec {
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: Padding::Zero,
            bias: true,
            zero_init: false,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: Padding::None,
            bias: true,
            zero_init: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let shape = [c_out, c_in, k, k];
        let weight = if spec.zero_init {
            ps.constant(&format!("{name}.weight"), &shape, 0.0)?
        } else {
            ps.he_uniform(&format!("{name}.weight"), &shape, c_in * k * k)?
        };
        let bias = if spec.bias {
            Some(ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    /// Overwrites the bias with a constant (initialization only).
    pub fn set_bias(&self, value: f64) -> Result<()> {
        if let Some(b) = &self.bias {
            b.set(&(b.ones_like()? * value)?)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let half = self.kernel / 2;
        let (x, pad) = match self.padding {
            Padding::None => (x.clone(), 0),
            Padding::Zero => (x.clone(), half),
            Padding::Replicate if half > 0 => (x.pad_with_same(2, half, half)?.pad_with_same(3, half, half)?, 0),
            Padding::Replicate => (x.clone(), 0),
        };
        let y = x.conv2d(self.weight.as_tensor(), pad, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, zero_init: bool) -> Result<Self> {
        let weight = if zero_init {
            ps.constant(&format!("{name}.weight"), &[d_out, d_in], 0.0)?
        } else {
            ps.he_uniform(&format!("{name}.weight"), &[d_out, d_in], d_in)?
        };
        let bias = Some(ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?);
        Ok(Self { weight, bias })
    }

    /// `[N, d_in] -> [N, d_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// Nearest-neighbor 2x upsampling built from broadcasting, so its gradient
/// is an exact sum over each 2x2 block.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Spatial mean `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    Ok(x.reshape((b, c, ()))?.mean(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut ps = ParamStore::new(DType::F64, seed);
            Conv2d::new(&mut ps, "c", 3, 4, ConvSpec::k3()).unwrap();
            Linear::new(&mut ps, "l", 4, 2, false).unwrap();
            ps.snapshot().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let w = ps.he_uniform("w", &[64, 6], 6).unwrap();
        let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        assert!(v.iter().any(|x| x.abs() > 0.5));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new(DType::F32, 0);
        ps.constant("a", &[1], 0.0).unwrap();
        assert!(ps.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn conv_shapes_and_replicate_padding() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let conv = Conv2d::new(&mut ps, "c", 2, 5, ConvSpec::k3().stride(2).padding(Padding::Replicate)).unwrap();
        let x = Tensor::ones((1, 2, 8, 6), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 5, 4, 3]);
        let conv = Conv2d::new(&mut ps, "d", 2, 5, ConvSpec::k3().stride(2)).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 5, 4, 3]);
    }

    #[test]
    fn bias_can_be_set() {
        let mut ps = ParamStore::new(DType::F32, 2);
        let conv = Conv2d::new(&mut ps, "c", 1, 1, ConvSpec::k1().zero_init()).unwrap();
        conv.set_bias(-2.5).unwrap();
        let x = Tensor::ones((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-2.5; 4]);
        let stored = ps.get("c.bias").unwrap().as_tensor().to_vec1::<f32>().unwrap();
        assert_eq!(stored, vec![-2.5]);
    }

    #[test]
    fn upsample_and_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap()).unwrap();
        let y = upsample2(x.as_tensor()).unwrap();
        assert_eq!(
            y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap(),
            vec![
                vec![1.0, 1.0, 2.0, 2.0],
                vec![1.0, 1.0, 2.0, 2.0],
                vec![3.0, 3.0, 4.0, 4.0],
                vec![3.0, 3.0, 4.0, 4.0]
            ]
        );
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![4.0; 4]);
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let x = Tensor::ones((1, 1000), DType::F64, &Device::Cpu).unwrap();
        let a = ForwardCtx::train(3).dropout(&x, 0.5).unwrap().to_vec2::<f64>().unwrap();
        let b = ForwardCtx::train(3).dropout(&x, 0.5).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        let zeros = a[0].iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(a[0].iter().all(|&v| v == 0.0 || v == 2.0));
        let e = ForwardCtx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(e.to_vec2::<f64>().unwrap(), x.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut a = ParamStore::new(DType::F32, 1);
        Linear::new(&mut a, "l", 3, 2, false).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(DType::F32, 2);
        Linear::new(&mut b, "l", 3, 2, false).unwrap();
        assert_ne!(a.snapshot().unwrap(), b.snapshot().unwrap());
        b.load(&path).unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
    }
}
