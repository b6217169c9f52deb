//! Adam with classic L2 weight decay folded into the gradient, plus the
//! step learning-rate schedule (decay by a fixed factor at a fixed epoch
//! interval).

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Result, Scalar};

/// Optimizer hyperparameters. `momentum` is Adam's first-moment coefficient.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamParams {
    pub base_learning_rate: f64,
    pub momentum: f64,
    pub second_moment: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: u32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            base_learning_rate: 1e-3,
            momentum: 0.9,
            second_moment: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_epochs: 20,
        }
    }
}

/// Learning rate at `epoch`: `base * factor^(epoch / interval)`.
pub fn adam_learning_rate(params: &AdamParams, epoch: u32) -> f64 {
    let steps = if params.lr_decay_epochs == 0 {
        0
    } else {
        epoch / params.lr_decay_epochs
    };
    params.base_learning_rate * params.lr_decay_factor.powi(steps as i32)
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState<T> {
    pub params: AdamParams,
    pub first_moment: Vec<ArrayD<T>>,
    pub second_moment: Vec<ArrayD<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: AdamParams, parameter_shapes: &[&[usize]]) -> Self {
        let zeros = |shapes: &[&[usize]]| {
            shapes
                .iter()
                .map(|s| ArrayD::zeros(ndarray::IxDyn(s)))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            params,
            first_moment: zeros(parameter_shapes),
            second_moment: zeros(parameter_shapes),
            step: 0,
        }
    }

    /// One Adam update over all parameters with the given learning rate.
    ///
    /// Weight decay enters as `g + wd * p` before the moment updates.
    pub fn adam_step(
        &mut self,
        parameters: &mut [ArrayD<T>],
        gradients: &[ArrayD<T>],
        learning_rate: f64,
    ) -> Result<()> {
        if parameters.len() != gradients.len()
            || parameters.len() != self.first_moment.len()
        {
            return Err(NumericsError::Optimizer(format!(
                "parameter/gradient count mismatch: {} vs {}",
                parameters.len(),
                gradients.len()
            )));
        }
        for (p, g) in parameters.iter().zip(gradients) {
            if p.shape() != g.shape() {
                return Err(NumericsError::Optimizer(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let b1 = T::from_f64(self.params.momentum);
        let b2 = T::from_f64(self.params.second_moment);
        let eps = T::from_f64(self.params.epsilon);
        let wd = T::from_f64(self.params.weight_decay);
        let lr = T::from_f64(learning_rate);
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in parameters
            .iter_mut()
            .zip(gradients)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
