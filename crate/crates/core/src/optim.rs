//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &ParameterSet<S>) -> Self {
        let zeros = |t: &crate::tensor::Tensor<S>| vec![S::zero(); t.numel()];
        Self {
            config,
            step: 0,
            m: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            v: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
        }
    }

    /// Applies one update to every parameter and zeroes its gradient.
    ///
    /// Every parameter must carry a gradient buffer; a missing one means the
    /// caller never ran `zero_grad` or the graph skipped it.
    pub fn step(&mut self, params: &mut ParameterSet<S>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad.is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
            match self.m.get(name) {
                Some(m) if m.len() == t.numel() => {}
                _ => return Err(Error::shape("adam_step", &t.shape, &[self.m.get(name).map_or(0, Vec::len)])),
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let t = self.step as i32;
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let lr = S::of(c.learning_rate);
        let eps = S::of(c.epsilon);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            let g = p.grad.as_mut().expect("checked above");
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                g[i] = S::zero();
            }
        }
        Ok(())
    }
}
