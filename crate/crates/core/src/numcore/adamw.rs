//! AdamW: bias-corrected Adam moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

/// Optimizer hyperparameters. One config is shared by every parameter tensor
/// of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..AdamWConfig::default()
        }
    }
}

/// Per-parameter optimizer state: first/second moment accumulators plus the
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamWState<S> {
    first_moment: Matrix<S>,
    second_moment: Matrix<S>,
    step: u64,
    pub config: AdamWConfig,
}

impl<S: Scalar> AdamWState<S> {
    /// Zeroed state for a parameter of shape `rows x cols`.
    pub fn new(rows: usize, cols: usize, config: AdamWConfig) -> Self {
        AdamWState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
            config,
        }
    }

    pub fn for_param(param: &Matrix<S>, config: AdamWConfig) -> Self {
        AdamWState::new(param.rows(), param.cols(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update:
    ///
    /// ```text
    /// m = b1*m + (1-b1)*g         v = b2*v + (1-b2)*g^2
    /// param -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * param
    /// ```
    ///
    /// The decay term is decoupled: it uses the parameter value from before
    /// the gradient step.
    pub fn update(&mut self, param: &mut Matrix<S>, grad: &Matrix<S>) -> Result<()> {
        if param.shape() != self.first_moment.shape() || grad.shape() != param.shape() {
            return Err(Error::dims(
                "adamw_step",
                format!(
                    "param {:?}, grad {:?}, state {:?}",
                    param.shape(),
                    grad.shape(),
                    self.first_moment.shape()
                ),
            ));
        }
        self.step += 1;
        let lr = S::cast(self.config.lr);
        let b1 = S::cast(self.config.beta1);
        let b2 = S::cast(self.config.beta2);
        let eps = S::cast(self.config.epsilon);
        let wd = S::cast(self.config.weight_decay);
        let one = S::one();
        let corr1 = one - S::cast(self.config.beta1.powi(self.step as i32));
        let corr2 = one - S::cast(self.config.beta2.powi(self.step as i32));

        let decay = one - lr * wd;
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(
                self.first_moment
                    .data_mut()
                    .iter_mut()
                    .zip(self.second_moment.data_mut()),
            )
        {
            *p *= decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
