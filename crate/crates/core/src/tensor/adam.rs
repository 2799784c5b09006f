//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::store::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }
}

/// Per-parameter first/second moments plus the step counter, keyed by name
/// so state survives store rebuilds.
pub struct AdamState<F> {
    pub opt: Adam,
    step: u64,
    moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(opt: Adam) -> Self {
        AdamState {
            opt,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter. Requires that a backward
    /// pass has populated gradients; zeroes the gradient slots afterwards.
    pub fn step(&mut self, store: &mut ParameterStore<F>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.opt.beta1);
        let b2 = F::from_f64(self.opt.beta2);
        let lr = F::from_f64(self.opt.lr);
        let eps = F::from_f64(self.opt.eps);
        let bc1 = F::one() - F::from_f64(self.opt.beta1).powi(t);
        let bc2 = F::one() - F::from_f64(self.opt.beta2).powi(t);

        for id in store.trainable_ids() {
            let name = store.name(id).to_string();
            let g = store
                .grad(id)
                .ok_or_else(|| Error::usage(format!("adam step: no gradient for parameter '{name}'")))?
                .clone();
            let shape = store.value(id).shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let p = store.value_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (F::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (F::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}
