use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::frozen_uniform;

/// Face-recognition backend: image batch in, descriptor batch out.
pub trait FaceEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// `x` is NCHW RGB in [-1, 1]; returns `[N, dim]`.
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
}

/// Frozen random convolutional embedder with a fixed descriptor width.
pub struct StubFaceEmbedder {
    convs: Vec<Tensor>,
    proj: Tensor,
    dim: usize,
}

impl StubFaceEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 8, 16, 32];
        let convs = widths
            .windows(2)
            .map(|w| frozen_uniform(&mut rng, &[w[1], w[0], 3, 3], (6.0 / (w[0] * 9) as f64).sqrt(), DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let proj = frozen_uniform(&mut rng, &[dim, 32], (3.0 / 32.0f64).sqrt(), DType::F32)?;
        Ok(Self { convs, proj, dim })
    }
}

impl FaceEmbedder for StubFaceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let mut h = x.clone();
        for w in &self.convs {
            h = h.conv2d(&w.to_dtype(dt)?, 1, 2, 1, 1)?.relu()?;
        }
        let pooled = h.flatten_from(2)?.mean(2)?;
        Ok(pooled.matmul(&self.proj.to_dtype(dt)?.t()?)?)
    }
}

/// `e(x) = W vec(x)`; differentiable in any dtype.
pub struct LinearFaceEmbedder {
    matrix: Tensor,
}

impl LinearFaceEmbedder {
    pub fn new(seed: u64, input_len: usize, dim: usize, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            matrix: frozen_uniform(&mut rng, &[dim, input_len], 1.0, dtype)?,
        })
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("embedding matrix must be 2-D"));
        }
        Ok(Self { matrix })
    }
}

impl FaceEmbedder for LinearFaceEmbedder {
    fn dim(&self) -> usize {
        self.matrix.dims()[0]
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.flatten_from(1)?.matmul(&self.matrix.t()?)?)
    }
}
