//! Network building blocks shared by the three generators: a seeded
//! parameter store, convolution/normalization layers, spatially-adaptive
//! conditioning, multi-scale patch discriminators and frozen feature
//! backends.

mod discriminator;
mod face;
mod generator;
mod optim;
mod perceptual;

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use discriminator::{features, scores, Discriminator, DiscriminatorBank, DiscriminatorConfig};
pub use face::{FaceEmbedder, LinearFaceEmbedder, StubFaceEmbedder};
pub use generator::{GeneratorConfig, GlobalGenerator};
pub use optim::{Adam, AdamConfig, Optimized};
pub use perceptual::{FeatureBackend, LinearFeatures, PerceptualExtractor, VggFeatures, VGG_TAPS};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters, initialized from a seeded generator so that
/// two stores built with the same seed and layer sequence are identical.
pub struct Params {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    prefix: Vec<String>,
}

impl Params {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            prefix: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Runs `f` with `name` pushed onto the parameter path.
    pub fn scope<T>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.as_ref().to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn path(&self, name: &str) -> String {
        let mut p = self.prefix.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(name);
        p
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let path = self.path(name);
        if self.vars.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter {path}")));
        }
        let t = Tensor::from_vec(data, shape, &device())?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(path, var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.register(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter from `tensors`; all names must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Random draws for non-parameter state (frozen backends).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    inner: candle_nn::Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        p: &mut Params,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (w, b) = p.scope(name, |p| {
            Ok((
                p.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound)?,
                p.uniform("bias", &[out_channels], bound)?,
            ))
        })?;
        let cfg = candle_nn::Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        };
        Ok(Self {
            inner: candle_nn::Conv2d::new(w, Some(b), cfg),
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let (w, b) = p.scope(name, |p| {
            Ok((
                p.uniform("weight", &[out_features, in_features], bound)?,
                p.uniform("bias", &[out_features], bound)?,
            ))
        })?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Parameter-free instance normalization over the spatial dims of NCHW.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LRELU_SLOPE)?)
}

/// Spatially-adaptive normalization: instance-normalized activations are
/// modulated per pixel by scale and shift maps predicted from the
/// conditioning map.
#[derive(Debug, Clone)]
pub struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(p: &mut Params, name: &str, channels: usize, cond_channels: usize, hidden: usize) -> Result<Self> {
        p.scope(name, |p| {
            Ok(Self {
                shared: Conv2d::new(p, "shared", cond_channels, hidden, 3, 1, 1)?,
                gamma: Conv2d::new(p, "gamma", hidden, channels, 3, 1, 1)?,
                beta: Conv2d::new(p, "beta", hidden, channels, 3, 1, 1)?,
            })
        })
    }

    /// `cond` must already match the spatial size of `x`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let normalized = instance_norm(x)?;
        let actv = self.shared.forward(cond)?.relu()?;
        let gamma = self.gamma.forward(&actv)?;
        let beta = self.beta.forward(&actv)?;
        Ok(((normalized * (gamma + 1.0)?)? + beta)?)
    }
}

/// Residual block: conv-IN-relu-conv-IN plus identity.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(p: &mut Params, name: &str, channels: usize) -> Result<Self> {
        p.scope(name, |p| {
            Ok(Self {
                conv1: Conv2d::new(p, "conv1", channels, channels, 3, 1, 1)?,
                conv2: Conv2d::new(p, "conv2", channels, channels, 3, 1, 1)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(x)?)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// Frozen (non-trainable) random tensor drawn from `rng`.
pub(crate) fn frozen_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let build = || {
            let mut p = Params::new(3, DType::F32);
            Conv2d::new(&mut p, "c", 2, 4, 3, 1, 1).unwrap();
            p.tensors()
        };
        let (a, b) = (build(), build());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            let d = (ta - tb).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
        assert_eq!(a[0].0, "c.bias");
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f32, 32.0, &device()).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x).unwrap();
        let m = y.mean_keepdim(D::Minus1).unwrap().mean_keepdim(D::Minus2).unwrap();
        for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Params::new(0, DType::F32);
        Linear::new(&mut p, "fc", 2, 2).unwrap();
        assert!(Linear::new(&mut p, "fc", 2, 2).is_err());
    }

    #[test]
    fn spade_output_shape() {
        let mut p = Params::new(1, DType::F32);
        let s = Spade::new(&mut p, "spade", 8, 2, 4).unwrap();
        let x = Tensor::ones((1, 8, 6, 6), DType::F32, &device()).unwrap();
        let c = Tensor::ones((1, 2, 6, 6), DType::F32, &device()).unwrap();
        assert_eq!(s.forward(&x, &c).unwrap().dims(), &[1, 8, 6, 6]);
    }
}
