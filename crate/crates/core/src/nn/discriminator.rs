use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, lrelu, Conv2d, Params};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Number of discriminators in the bank; discriminator `k` sees the
    /// input downsampled by `2^k`.
    pub count: usize,
    pub base_width: usize,
    pub layers: usize,
    pub max_width: usize,
}

impl DiscriminatorConfig {
    pub fn full() -> Self {
        Self {
            count: 2,
            base_width: 64,
            layers: 3,
            max_width: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            count: 2,
            base_width: 16,
            layers: 3,
            max_width: 64,
        }
    }
}

/// PatchGAN discriminator returning every layer's activation; the last
/// entry is the patch score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(p: &mut Params, in_channels: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.layers + 1);
        let mut c_in = in_channels;
        for i in 0..cfg.layers {
            let c_out = (cfg.base_width << i).min(cfg.max_width);
            let stride = if i + 1 < cfg.layers { 2 } else { 1 };
            convs.push(Conv2d::new(p, &format!("conv{i}"), c_in, c_out, 4, stride, 2)?);
            c_in = c_out;
        }
        convs.push(Conv2d::new(p, "score", c_in, 1, 4, 1, 2)?);
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i != last {
                if i > 0 {
                    h = instance_norm(&h)?;
                }
                h = lrelu(&h)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }

    pub fn layer_count(&self) -> usize {
        self.convs.len()
    }
}

/// Multi-scale bank of patch discriminators.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    discriminators: Vec<Discriminator>,
    pub config: DiscriminatorConfig,
}

impl DiscriminatorBank {
    pub fn new(p: &mut Params, in_channels: usize, cfg: DiscriminatorConfig) -> Result<Self> {
        if cfg.count == 0 {
            return Err(Error::EmptyBank);
        }
        let discriminators = (0..cfg.count)
            .map(|k| p.scope(format!("d{}", k + 1), |p| Discriminator::new(p, in_channels, &cfg)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            discriminators,
            config: cfg,
        })
    }

    pub fn count(&self) -> usize {
        self.discriminators.len()
    }

    /// Downsampling factor applied before discriminator `k`.
    pub fn scale(&self, k: usize) -> usize {
        1 << k
    }

    /// Per-discriminator activations; `out[k].last()` is the score map.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut input = x.clone();
        let mut out = Vec::with_capacity(self.count());
        for (k, d) in self.discriminators.iter().enumerate() {
            if k > 0 {
                input = input.avg_pool2d(2)?;
            }
            out.push(d.forward(&input)?);
        }
        Ok(out)
    }
}

/// Score maps only.
pub fn scores(acts: &[Vec<Tensor>]) -> Vec<Tensor> {
    acts.iter().map(|a| a.last().expect("nonempty").clone()).collect()
}

/// Intermediate activations used for feature matching (score map excluded).
pub fn features(acts: &[Vec<Tensor>]) -> Vec<Vec<Tensor>> {
    acts.iter().map(|a| a[..a.len() - 1].to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn bank_scales_and_layers() {
        let mut p = Params::new(0, DType::F32);
        let bank = DiscriminatorBank::new(&mut p, 3, DiscriminatorConfig::desk()).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &crate::nn::device()).unwrap();
        let acts = bank.forward(&x).unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[0].len(), 4);
        assert_eq!(bank.scale(1), 2);
        let s0 = acts[0][0].dims()[2];
        let s1 = acts[1][0].dims()[2];
        assert!(s1 < s0);
        assert_eq!(scores(&acts)[0].dims()[1], 1);
    }

    #[test]
    fn empty_bank_rejected() {
        let mut p = Params::new(0, DType::F32);
        let cfg = DiscriminatorConfig {
            count: 0,
            ..DiscriminatorConfig::desk()
        };
        assert!(matches!(DiscriminatorBank::new(&mut p, 3, cfg), Err(Error::EmptyBank)));
    }
}
