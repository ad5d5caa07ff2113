//! SGD with momentum and coupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, DenseTensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// `v ← momentum·v + grad + weight_decay·param`, then `param ← param − lr·v`.
    /// Velocity buffers are created lazily, on the first step of each parameter.
    pub fn step(&mut self, name: &str, param: &mut DenseTensor, grad: &DenseTensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter `{name}` has shape {:?}, gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| DenseTensor::zeros(param.shape()));
        let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for ((p, g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *vel = m * *vel + g + wd * *p;
            *p -= lr * *vel;
        }
        Ok(())
    }

    /// Names of parameters that currently hold optimizer state.
    pub fn state_keys(&self) -> impl Iterator<Item = &str> {
        self.velocity.keys().map(String::as_str)
    }
}
