use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, Gradients};
use crate::error::{Error, Result};

/// Bias-corrected Adam over an ordered list of parameter slices.
///
/// Moment buffers are created lazily on the first step and mirror the slice
/// shapes from then on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                context: "adam slices",
                expected: params.len(),
                got: grads.len(),
            });
        }
        let mut offset = 0;
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    context: "adam slice",
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { index: offset + i });
            }
            offset += g.len();
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::Dimension {
                context: "adam state shape",
                expected: self.m.len(),
                got: grads.len(),
            });
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / bc1;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let g = grads.slices();
        self.step(net.param_slices_mut(), &g)
    }
}
