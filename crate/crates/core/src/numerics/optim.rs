use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<F>>,
    second: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        // validate everything before touching state
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {:?} for parameter {name} of {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64c(c.beta1), F::from_f64c(c.beta2));
        let (lr, eps) = (F::from_f64c(c.lr), F::from_f64c(c.eps));
        let (bc1, bc2) = (F::from_f64c(bc1), F::from_f64c(bc2));
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (F::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (F::one() - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
