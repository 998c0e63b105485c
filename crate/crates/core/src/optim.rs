//! Stochastic gradient descent with momentum and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{GmnnError, Result};
use crate::nn::{Gradients, ParamStore};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: Scalar,
    pub momentum: Scalar,
    pub weight_decay: Scalar,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Matrix>,
}

impl SgdState {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Self {
        let velocity = store
            .iter()
            .map(|(_, _, v)| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        SgdState { config, velocity }
    }

    pub fn velocity(&self, i: usize) -> &Matrix {
        &self.velocity[i]
    }

    /// `v ← µv + (g + λθ)`, `θ ← θ − ηv`. Parameters without a gradient
    /// still decay and coast on their velocity.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(GmnnError::shape("optimizer state does not match parameters"));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let theta = store.get_mut(id);
            let v = &mut self.velocity[id.0];
            let g = grads.get(id);
            if let Some(g) = g {
                if g.shape() != theta.shape() {
                    return Err(GmnnError::shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        theta.shape()
                    )));
                }
            }
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g.as_slice()[i]);
                let th = theta.as_slice()[i];
                let vi = &mut v.as_mut_slice()[i];
                *vi = momentum * *vi + (gi + weight_decay * th);
                theta.as_mut_slice()[i] = th - lr * *vi;
            }
        }
        Ok(())
    }
}
