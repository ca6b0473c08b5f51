use std::collections::HashMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are exposed so that training
/// can be resumed bit-for-bit from a checkpoint.
pub struct Adam {
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    pub step: u64,
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(params: &Params, config: AdamConfig) -> Result<Self> {
        let vars: Vec<(String, Var)> = params.vars().map(|(k, v)| (k.clone(), v.clone())).collect();
        let first = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            vars,
            first,
            second,
            step: 0,
            config,
        })
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients may carry graph edges back to parameters
            let g = g.detach();
            let m = ((&self.first[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / correction1)?;
            let v_hat = (&v / correction2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * c.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.vars.len() * 2);
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.first[i].clone()));
            out.push((format!("adam.v.{name}"), self.second[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, _)) in self.vars.iter().enumerate() {
            let get = |k: String| tensors.get(&k).cloned().ok_or(Error::Checkpoint(format!("missing {k}")));
            self.first[i] = get(format!("adam.m.{name}"))?;
            self.second[i] = get(format!("adam.v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}

/// A parameter store together with its optimizer.
pub struct Optimized {
    pub params: Params,
    pub opt: Adam,
}

impl Optimized {
    pub fn new(params: Params, config: AdamConfig) -> Result<Self> {
        let opt = Adam::new(&params, config)?;
        Ok(Self { params, opt })
    }

    /// Backpropagates `loss` and updates only this store's parameters.
    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        self.opt.backward_step(loss)
    }

    /// Parameters and optimizer moments under `prefix.`.
    pub fn state(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.params
            .tensors()
            .into_iter()
            .chain(self.opt.state_tensors())
            .map(|(k, v)| (format!("{prefix}.{k}"), v))
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        let own = crate::checkpoint::strip_prefix(tensors, prefix);
        self.params.load(&own)?;
        self.opt.load_state(&own, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Params::new(0, DType::F64);
        let w = p.constant("w", &[3], 5.0).unwrap();
        let mut opt = Adam::new(
            &p,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..500 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let v = w.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }
}
