//! Central finite-difference check of autograd gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::scalar;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Upper bound on checked coordinates per parameter tensor; all are
    /// checked when the tensor is smaller.
    pub samples: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples: 64,
            floor: 1e-8,
            seed: 0,
        }
    }
}

fn eval(loss_fn: &impl Fn(&[Tensor]) -> Result<Tensor>, params: &[Tensor]) -> Result<f64> {
    let v = scalar(&loss_fn(params)?)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss = {v}")));
    }
    Ok(v)
}

/// Compares autograd gradients of `loss_fn` at `params` against central
/// differences and returns the largest relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|, floor)` over the sampled coordinates.
/// All parameters are promoted to f64.
pub fn finite_diff_check(
    loss_fn: impl Fn(&[Tensor]) -> Result<Tensor>,
    params: &[Tensor],
    cfg: GradCheckConfig,
) -> Result<GradCheck> {
    let base: Vec<Tensor> = params
        .iter()
        .map(|p| p.to_dtype(DType::F64))
        .collect::<candle_core::Result<_>>()?;
    let vars: Vec<Var> = base.iter().map(Var::from_tensor).collect::<candle_core::Result<_>>()?;
    let tracked: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = loss_fn(&tracked)?;
    let l = scalar(&loss)?;
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("loss = {l}")));
    }
    let grads = loss.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (i, var) in vars.iter().enumerate() {
        let n = base[i].elem_count();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; n],
        };
        let data: Vec<f64> = base[i].flatten_all()?.to_vec1()?;
        let idx: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples).into_vec();
            v.sort_unstable();
            v
        };
        for j in idx {
            let shifted = |delta: f64| -> Result<f64> {
                let mut d = data.clone();
                d[j] += delta;
                let mut ps = base.clone();
                ps[i] = Tensor::from_vec(d, base[i].dims(), base[i].device())?;
                eval(&loss_fn, &ps)
            };
            let numeric = (shifted(cfg.eps)? - shifted(-cfg.eps)?) / (2.0 * cfg.eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &device()).unwrap();
        let r = finite_diff_check(
            |p| Ok(p[0].sqr()?.sin()?.sum_all()?),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.coordinates, 3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detach hides the dependence from autograd
        let x = Tensor::new(&[0.5f64, 1.5], &device()).unwrap();
        let r = finite_diff_check(
            |p| Ok((p[0].sum_all()? + p[0].detach().sqr()?.sum_all()?)?),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_loss_errors() {
        let x = Tensor::new(&[-1.0f64], &device()).unwrap();
        let r = finite_diff_check(|p| Ok(p[0].log()?.sum_all()?), &[x], GradCheckConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
