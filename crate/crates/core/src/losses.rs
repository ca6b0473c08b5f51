//! Loss kernels. Each is a pure function of tensors and differentiable
//! through candle's autograd. L1 terms use mean reduction; derivative terms
//! use forward differences over the last two (spatial) dimensions.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PerceptualExtractor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::SpatialTooSmall { height: 0, width: 0 });
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::SpatialTooSmall { height: h, width: w });
    }
    Ok((h, w))
}

/// Forward differences along x (last dim) and y (second-to-last).
pub fn forward_diffs(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = spatial(t)?;
    let dx = (t.narrow(D::Minus1, 1, w - 1)? - t.narrow(D::Minus1, 0, w - 1)?)?;
    let dy = (t.narrow(D::Minus2, 1, h - 1)? - t.narrow(D::Minus2, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// `mean|a_x| + mean|a_y|`, or with `b` the L1 distance between the
/// difference fields of `a` and `b`.
pub fn grad_l1(a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (ax, ay) = forward_diffs(a)?;
    match b {
        None => Ok((ax.abs()?.mean_all()? + ay.abs()?.mean_all()?)?),
        Some(b) => {
            same_shape(a, b)?;
            let (bx, by) = forward_diffs(b)?;
            Ok((l1(&ax, &bx)? + l1(&ay, &by)?)?)
        }
    }
}

/// Generator hinge term: `-sum_k mean(D_k(fake))`. Unbounded below.
pub fn hinge_g(fake_scores: &[Tensor]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for s in fake_scores {
        let term = s.mean_all()?.neg()?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or(Error::EmptyBank)
}

/// Discriminator hinge: `sum_k mean(relu(1 - D_k(real))) + mean(relu(1 + D_k(fake)))`.
pub fn hinge_d(real_scores: &[Tensor], fake_scores: &[Tensor]) -> Result<Tensor> {
    if real_scores.is_empty() {
        return Err(Error::EmptyBank);
    }
    if real_scores.len() != fake_scores.len() {
        return Err(Error::shape(format!(
            "{} real vs {} fake discriminator outputs",
            real_scores.len(),
            fake_scores.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real_scores.iter().zip(fake_scores) {
        same_shape(r, f)?;
        let real_term = (1.0 - r)?.relu()?.mean_all()?;
        let fake_term = (f + 1.0)?.relu()?.mean_all()?;
        let term = (real_term + fake_term)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Discriminator feature matching: `sum_k sum_j (1/N_j) |D_k^j(real) - D_k^j(fake)|_1`.
/// Real activations are detached.
pub fn fm_discriminator(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::LayerCountMismatch {
            real: real.len(),
            fake: fake.len(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (rk, fk) in real.iter().zip(fake) {
        if rk.len() != fk.len() {
            return Err(Error::LayerCountMismatch {
                real: rk.len(),
                fake: fk.len(),
            });
        }
        for (r, f) in rk.iter().zip(fk) {
            let term = l1(&r.detach(), f)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    match acc {
        Some(t) => Ok(t),
        None => Err(Error::EmptyBank),
    }
}

/// Classifier feature matching between a real image `x` and output `o`.
pub fn fm_perceptual(x: &Tensor, o: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    same_shape(x, o)?;
    let fx = extractor.features(&x.detach())?;
    let fo = extractor.features(o)?;
    let mut acc: Option<Tensor> = None;
    for ((a, b), &gain) in fx.iter().zip(&fo).zip(&extractor.gains) {
        let term = (l1(a, b)? * gain)?;
        acc = Some(match acc {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    acc.ok_or(Error::BackendMissing("perceptual (no tapped layers)"))
}

/// Per-term loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub fm_discriminator: f64,
    pub fm_perceptual: f64,
    pub mask_l1: f64,
    pub mask_grad: f64,
    pub recon_l1: f64,
    pub recon_grad: f64,
    pub pose_grad: f64,
    pub face_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            fm_discriminator: 10.0,
            fm_perceptual: 10.0,
            mask_l1: 1.0,
            mask_grad: 5.0,
            recon_l1: 10.0,
            recon_grad: 10.0,
            pose_grad: 1.0,
            face_identity: 1.0,
        }
    }
}

impl LossWeights {
    /// Weights for the pose generator: classifier feature matching off.
    pub fn pose_generator() -> Self {
        Self {
            fm_perceptual: 0.0,
            ..Self::default()
        }
    }
}

/// Scalar components of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub fm_d: f64,
    pub fm_perceptual: f64,
    pub mask_l1: f64,
    pub mask_grad: f64,
    pub recon_l1: f64,
    pub recon_grad: f64,
    pub pose_grad: f64,
    pub face_identity: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub weights: Option<LossWeights>,
}

impl LossReport {
    /// Fills `total_g` / `total_d` from the components and `weights`.
    pub fn finalize(mut self, weights: LossWeights) -> Self {
        self.total_g = weights.adversarial * self.adversarial_g
            + weights.fm_discriminator * self.fm_d
            + weights.fm_perceptual * self.fm_perceptual
            + weights.mask_l1 * self.mask_l1
            + weights.mask_grad * self.mask_grad
            + weights.recon_l1 * self.recon_l1
            + weights.recon_grad * self.recon_grad
            + weights.pose_grad * self.pose_grad
            + weights.face_identity * self.face_identity;
        self.total_d = weights.adversarial * self.adversarial_d;
        self.weights = Some(weights);
        self
    }

    pub fn components(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("adversarial_g", self.adversarial_g),
            ("adversarial_d", self.adversarial_d),
            ("fm_d", self.fm_d),
            ("fm_perceptual", self.fm_perceptual),
            ("mask_l1", self.mask_l1),
            ("mask_grad", self.mask_grad),
            ("recon_l1", self.recon_l1),
            ("recon_grad", self.recon_grad),
            ("pose_grad", self.pose_grad),
            ("face_identity", self.face_identity),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ])
    }

    /// Errors with every component listed if any value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        let c = self.components();
        if c.values().all(|v| v.is_finite()) {
            return Ok(());
        }
        let detail = c
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::NonFinite(detail))
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, LinearFeatures};
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &device()).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        scalar(&x).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = t(&[1.0, -1.0], &[2]);
        assert_eq!(s(l1(&a, &a).unwrap()), 0.0);
        assert_eq!(s(l1(&a, &t(&[0.0, 0.0], &[2])).unwrap()), 1.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let oracle = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 25.0;
        let got = s(l1(&t(&x, &[5, 5]), &t(&y, &[5, 5])).unwrap());
        assert!((got - oracle).abs() < 1e-12);
        assert!(l1(&t(&x, &[5, 5]), &t(&y, &[25])).is_err());
    }

    #[test]
    fn grad_l1_examples() {
        let c = Tensor::full(3.0f64, (4, 4), &device()).unwrap();
        assert_eq!(s(grad_l1(&c, None).unwrap()), 0.0);

        // horizontal ramp with slope 1: x-term 1, y-term 0
        let ramp = Tensor::from_vec((0..20).map(|i| (i % 5) as f64).collect::<Vec<_>>(), (4, 5), &device()).unwrap();
        let (dx, dy) = forward_diffs(&ramp).unwrap();
        assert_eq!(s(dx.abs().unwrap().mean_all().unwrap()), 1.0);
        assert_eq!(s(dy.abs().unwrap().mean_all().unwrap()), 0.0);
        assert_eq!(s(grad_l1(&ramp, None).unwrap()), 1.0);

        let r = Tensor::rand(0f64, 1.0, (1, 2, 6, 6), &device()).unwrap();
        assert_eq!(s(grad_l1(&r, Some(&r)).unwrap()), 0.0);
        assert!(matches!(
            grad_l1(&Tensor::zeros((1, 5), DType::F64, &device()).unwrap(), None),
            Err(Error::SpatialTooSmall { .. })
        ));
    }

    #[test]
    fn hinge_g_examples() {
        let ones = Tensor::ones((1, 1, 3, 3), DType::F64, &device()).unwrap();
        assert_eq!(s(hinge_g(&[ones.clone(), ones]).unwrap()), -2.0);
        let z = Tensor::zeros((1, 1, 3, 3), DType::F64, &device()).unwrap();
        assert_eq!(s(hinge_g(&[z.clone(), z]).unwrap()), 0.0);
        assert_eq!(s(hinge_g(&[t(&[2.0, -2.0], &[2])]).unwrap()), 0.0);
        assert!(matches!(hinge_g(&[]), Err(Error::EmptyBank)));
    }

    #[test]
    fn hinge_d_examples() {
        let shape = (1, 1, 4, 4);
        let full = |v: f64| Tensor::full(v, shape, &device()).unwrap();
        assert_eq!(s(hinge_d(&[full(1.0)], &[full(-1.0)]).unwrap()), 0.0);
        assert_eq!(s(hinge_d(&[full(0.0)], &[full(0.0)]).unwrap()), 2.0);
        assert_eq!(s(hinge_d(&[full(2.0)], &[full(-3.0)]).unwrap()), 0.0);
        assert!(hinge_d(&[full(0.0)], &[t(&[0.0], &[1])]).is_err());
        assert!(hinge_d(&[full(0.0)], &[]).is_err());
    }

    #[test]
    fn fm_discriminator_examples() {
        let a = vec![vec![t(&[0.0, 0.0, 0.0, 0.0], &[4])]];
        let b = vec![vec![t(&[1.0, -1.0, 1.0, 1.0], &[4])]];
        assert_eq!(s(fm_discriminator(&a, &a).unwrap()), 0.0);
        assert_eq!(s(fm_discriminator(&a, &b).unwrap()), 1.0);

        // doubling the element count at a fixed per-element gap halves a
        // sum-normalized contribution relative to the unnormalized sum
        let small = (vec![vec![t(&[0.0; 4], &[4])]], vec![vec![t(&[0.5; 4], &[4])]]);
        let big = (vec![vec![t(&[0.0; 8], &[8])]], vec![vec![t(&[0.5; 8], &[8])]]);
        let per_elem_small = s(fm_discriminator(&small.0, &small.1).unwrap()) / (4.0 * 0.5);
        let per_elem_big = s(fm_discriminator(&big.0, &big.1).unwrap()) / (8.0 * 0.5);
        assert!((per_elem_small - 2.0 * per_elem_big).abs() < 1e-15);

        let two = vec![vec![t(&[0.0], &[1]), t(&[0.0], &[1])]];
        assert!(matches!(fm_discriminator(&a, &two), Err(Error::LayerCountMismatch { .. })));
    }

    #[test]
    fn fm_layer_order_invariant() {
        let r = vec![vec![t(&[1.0, 2.0], &[2]), t(&[0.5, 0.0, 1.0], &[3])]];
        let f = vec![vec![t(&[0.0, 2.5], &[2]), t(&[0.0, 1.0, 1.0], &[3])]];
        let rr = vec![vec![r[0][1].clone(), r[0][0].clone()]];
        let ff = vec![vec![f[0][1].clone(), f[0][0].clone()]];
        let a = s(fm_discriminator(&r, &f).unwrap());
        let b = s(fm_discriminator(&rr, &ff).unwrap());
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn fm_perceptual_properties() {
        let backend = Arc::new(LinearFeatures::random(2, 12, &[5, 3], DType::F64).unwrap());
        let mut ex = PerceptualExtractor::new(backend, 2);
        let x = Tensor::rand(-1f64, 1.0, (1, 3, 2, 2), &device()).unwrap();
        let o = Tensor::rand(-1f64, 1.0, (1, 3, 2, 2), &device()).unwrap();
        assert_eq!(s(fm_perceptual(&x, &x, &ex).unwrap()), 0.0);
        let base = s(fm_perceptual(&x, &o, &ex).unwrap());
        ex.gains = vec![2.5, 2.5];
        let scaled = s(fm_perceptual(&x, &o, &ex).unwrap());
        assert!((scaled - 2.5 * base).abs() < 1e-12);
        assert!(matches!(
            fm_perceptual(&x, &o, &PerceptualExtractor::unavailable()),
            Err(Error::BackendMissing(_))
        ));
    }

    #[test]
    fn report_totals_are_weighted_sums() {
        let w = LossWeights::default();
        let r = LossReport {
            adversarial_g: -0.3,
            adversarial_d: 1.7,
            fm_d: 0.25,
            fm_perceptual: 0.125,
            mask_l1: 0.5,
            mask_grad: 0.01,
            recon_l1: 0.2,
            recon_grad: 0.05,
            ..Default::default()
        }
        .finalize(w);
        let expect = -0.3 + 10.0 * 0.25 + 10.0 * 0.125 + 0.5 + 5.0 * 0.01 + 10.0 * 0.2 + 10.0 * 0.05;
        assert!((r.total_g - expect).abs() < 1e-12);
        assert_eq!(r.total_d, 1.7);
        assert!(r.check_finite().is_ok());
        let bad = LossReport {
            recon_l1: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(bad.check_finite(), Err(Error::NonFinite(msg)) if msg.contains("recon_l1=NaN")));
    }
}
