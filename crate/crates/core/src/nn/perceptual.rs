use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{device, frozen_uniform};

/// Frozen feature network exposing a fixed list of tapped activations.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Tapped layers of the 19-layer VGG classifier (first ReLU of each block),
/// by index into the classifier's `features` sequence.
pub const VGG_TAPS: [usize; 5] = [1, 6, 11, 20, 29];

const VGG_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

struct VggConv {
    weight: Tensor,
    bias: Tensor,
}

/// VGG-19 feature trunk up to the last tap. Either loaded from pretrained
/// weights (`features.{i}.weight` / `features.{i}.bias` safetensors names)
/// or built with frozen random weights and a reduced width, keeping the
/// same tap topology.
pub struct VggFeatures {
    convs: Vec<(usize, VggConv)>,
    name: String,
}

impl VggFeatures {
    fn layout(width_divisor: usize) -> Vec<(usize, usize, usize)> {
        // (sequence index, in, out) for every conv up to the last tap
        let mut out = Vec::new();
        let mut idx = 0;
        let mut c_in = 3;
        for (b, &(w, n)) in VGG_BLOCKS.iter().enumerate() {
            let w = (w / width_divisor).max(1);
            for _ in 0..n {
                if idx > *VGG_TAPS.last().unwrap() {
                    return out;
                }
                out.push((idx, c_in, w));
                c_in = w;
                idx += 2;
            }
            if b + 1 < VGG_BLOCKS.len() {
                idx += 1; // pool
            }
        }
        out
    }

    pub fn random(seed: u64, width_divisor: usize, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = Self::layout(width_divisor)
            .into_iter()
            .map(|(idx, c_in, c_out)| {
                let bound = (6.0 / (c_in * 9) as f64).sqrt();
                Ok((
                    idx,
                    VggConv {
                        weight: frozen_uniform(&mut rng, &[c_out, c_in, 3, 3], bound, dtype)?,
                        bias: Tensor::zeros(c_out, dtype, &device())?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            name: format!("vgg19-stub/{width_divisor}"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &device()).map_err(|e| Error::from(e).at(path))?;
        let convs = Self::layout(1)
            .into_iter()
            .map(|(idx, _, _)| {
                let get = |k: &str| {
                    tensors
                        .get(&format!("features.{idx}.{k}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing features.{idx}.{k}")))
                        .and_then(|t| Ok(t.to_dtype(DType::F32)?))
                };
                Ok((
                    idx,
                    VggConv {
                        weight: get("weight")?,
                        bias: get("bias")?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            name: "vgg19".into(),
        })
    }
}

impl FeatureBackend for VggFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    /// `x` is NCHW RGB in [-1, 1].
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dt = x.dtype();
        let mean = Tensor::new(&[0.485f32, 0.456, 0.406], &device())?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&[0.229f32, 0.224, 0.225], &device())?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let mut h = ((x + 1.0)? * 0.5)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut taps = Vec::with_capacity(VGG_TAPS.len());
        let mut prev_idx = None;
        for (idx, conv) in &self.convs {
            if let Some(p) = prev_idx {
                // a pooling layer sits between non-consecutive convs
                if idx - p == 3 {
                    h = h.max_pool2d(2)?;
                }
            }
            h = h
                .conv2d(&conv.weight.to_dtype(dt)?, 1, 1, 1, 1)?
                .broadcast_add(&conv.bias.to_dtype(dt)?.reshape((1, (), 1, 1))?)?
                .relu()?;
            if VGG_TAPS.contains(&(idx + 1)) {
                taps.push(h.clone());
            }
            prev_idx = Some(*idx);
        }
        Ok(taps)
    }
}

/// Linear feature maps `F_j(x) = W_j vec(x)`; used to check gradients in
/// double precision.
pub struct LinearFeatures {
    matrices: Vec<Tensor>,
}

impl LinearFeatures {
    pub fn random(seed: u64, input_len: usize, layer_sizes: &[usize], dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrices = layer_sizes
            .iter()
            .map(|&k| frozen_uniform(&mut rng, &[k, input_len], 1.0, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { matrices })
    }
}

impl FeatureBackend for LinearFeatures {
    fn name(&self) -> &str {
        "linear-stub"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let flat = x.flatten_from(1)?;
        self.matrices
            .iter()
            .map(|m| Ok(flat.matmul(&m.t()?)?))
            .collect()
    }
}

/// Feature-matching / perceptual-distance front end over a pluggable
/// backend. Layer `j` is weighted by `gain_j / N'_j` with `N'_j` the
/// element count of that layer's activation.
#[derive(Clone)]
pub struct PerceptualExtractor {
    backend: Option<Arc<dyn FeatureBackend>>,
    pub gains: Vec<f64>,
}

impl PerceptualExtractor {
    pub fn new(backend: Arc<dyn FeatureBackend>, layers: usize) -> Self {
        Self {
            backend: Some(backend),
            gains: vec![1.0; layers],
        }
    }

    pub fn unavailable() -> Self {
        Self {
            backend: None,
            gains: Vec::new(),
        }
    }

    pub fn desk_stub(seed: u64) -> Result<Self> {
        Ok(Self::new(Arc::new(VggFeatures::random(seed, 8, DType::F32)?), VGG_TAPS.len()))
    }

    pub fn is_available(&self) -> bool {
        self.backend.is_some()
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let backend = self.backend.as_ref().ok_or(Error::BackendMissing("perceptual"))?;
        let f = backend.features(x)?;
        if f.len() != self.gains.len() {
            return Err(Error::LayerCountMismatch {
                real: f.len(),
                fake: self.gains.len(),
            });
        }
        Ok(f)
    }

    /// Element counts of each tapped layer for an input of `shape`.
    pub fn layer_sizes(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.features(x)?.iter().map(|t| t.elem_count()).collect())
    }

    /// Channel-normalized squared feature distance averaged over space and
    /// summed over layers (LPIPS-style, unlearned weights).
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let nx = unit_channels(x)?;
            let ny = unit_channels(y)?;
            let d = (nx - ny)?.sqr()?.sum_keepdim(1)?.mean_all()?;
            total += d.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total)
    }
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let x = if x.rank() == 2 { x.unsqueeze(2)? } else { x.clone() };
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_taps_match_topology() {
        let vgg = VggFeatures::random(0, 8, DType::F32).unwrap();
        assert_eq!(vgg.convs.len(), 13);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &device()).unwrap();
        let f = vgg.features(&x).unwrap();
        assert_eq!(f.len(), 5);
        let sizes: Vec<usize> = f.iter().map(|t| t.dims()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        let chans: Vec<usize> = f.iter().map(|t| t.dims()[1]).collect();
        assert_eq!(chans, vec![8, 16, 32, 64, 64]);
    }

    #[test]
    fn missing_backend_is_explicit() {
        let e = PerceptualExtractor::unavailable();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &device()).unwrap();
        assert!(matches!(e.features(&x), Err(Error::BackendMissing(_))));
    }

    #[test]
    fn distance_to_self_is_zero() {
        let e = PerceptualExtractor::desk_stub(1).unwrap();
        let x = Tensor::rand(-1f32, 1.0, (1, 3, 32, 32), &device()).unwrap();
        assert!(e.distance(&x, &x).unwrap().abs() < 1e-12);
    }
}
