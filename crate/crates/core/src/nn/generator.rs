use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{instance_norm, Conv2d, Params, ResBlock};

/// Encoder / residual core / decoder sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub downsamples: usize,
    pub res_blocks: usize,
    pub max_width: usize,
}

impl GeneratorConfig {
    pub fn full() -> Self {
        Self {
            base_width: 64,
            downsamples: 4,
            res_blocks: 9,
            max_width: 1024,
        }
    }

    pub fn desk() -> Self {
        Self {
            base_width: 16,
            downsamples: 2,
            res_blocks: 2,
            max_width: 64,
        }
    }

    fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }
}

/// Global encoder-decoder generator: 7x7 stem, strided downsampling,
/// residual core, nearest-upsample + conv decoder, tanh output.
#[derive(Debug, Clone)]
pub struct GlobalGenerator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    core: Vec<ResBlock>,
    up: Vec<Conv2d>,
    head: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
    pub config: GeneratorConfig,
}

impl GlobalGenerator {
    pub fn new(p: &mut Params, in_channels: usize, out_channels: usize, config: GeneratorConfig) -> Result<Self> {
        let stem = Conv2d::new(p, "stem", in_channels, config.width(0), 7, 1, 3)?;
        let down = (0..config.downsamples)
            .map(|i| Conv2d::new(p, &format!("down{i}"), config.width(i), config.width(i + 1), 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let core_w = config.width(config.downsamples);
        let core = (0..config.res_blocks)
            .map(|i| ResBlock::new(p, &format!("res{i}"), core_w))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..config.downsamples)
            .rev()
            .map(|i| Conv2d::new(p, &format!("up{i}"), config.width(i + 1), config.width(i), 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(p, "head", config.width(0), out_channels, 7, 1, 3)?;
        Ok(Self {
            stem,
            down,
            core,
            up,
            head,
            in_channels,
            out_channels,
            config,
        })
    }

    /// Input spatial size must be divisible by `2^downsamples`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = instance_norm(&self.stem.forward(x)?)?.relu()?;
        for d in &self.down {
            h = instance_norm(&d.forward(&h)?)?.relu()?;
        }
        for r in &self.core {
            h = r.forward(&h)?;
        }
        for u in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = instance_norm(&u.forward(&h)?)?.relu()?;
        }
        Ok(self.head.forward(&h)?.tanh()?)
    }
}
