use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

use super::Gradients;

/// SGD with heavy-ball momentum: `v <- mu * v + g`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("gradient for `{name}`")))?;
            if g.len() != tensor.len() {
                return Err(Error::Shape(format!("gradient for `{name}` has wrong length")));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.learning_rate;
            tensor.update(|d| {
                for (w, vi) in d.iter_mut().zip(v.iter()) {
                    *w -= lr * vi;
                }
            });
        }
        Ok(())
    }
}
