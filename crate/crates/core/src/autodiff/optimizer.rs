//! SGD and Adam parameter updates over graph leaves.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSettings {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }
}

/// Holds per-parameter moment buffers; `step` consumes the accumulated
/// gradients and zeroes them.
pub struct Optimizer<S: Scalar> {
    settings: OptimizerSettings,
    steps: u64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(settings: OptimizerSettings, params: &[Value<S>]) -> Self {
        let zeros: Vec<Array2<S>> = params
            .iter()
            .map(|p| {
                let (r, c) = p.shape();
                Array2::zeros((r, c))
            })
            .collect();
        Self {
            settings,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update; `params` must match the slice passed to `new` in
    /// order and shape.
    pub fn step(&mut self, params: &[Value<S>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter mismatch");
        self.steps += 1;
        let lr = S::from_f64(self.settings.learning_rate);
        match self.settings.kind {
            OptimizerKind::Sgd => {
                for p in params {
                    p.update_data(|data, grad| {
                        data.zip_mut_with(grad, |d, &g| *d = *d - lr * g);
                    });
                }
            }
            OptimizerKind::Adam => {
                let b1 = S::from_f64(self.settings.beta1);
                let b2 = S::from_f64(self.settings.beta2);
                let eps = S::from_f64(self.settings.eps);
                let one = S::one();
                let bc1 = one - S::from_f64(self.settings.beta1.powi(self.steps as i32));
                let bc2 = one - S::from_f64(self.settings.beta2.powi(self.steps as i32));
                for (i, p) in params.iter().enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    p.update_data(|data, grad| {
                        ndarray::Zip::from(data)
                            .and(grad)
                            .and(m)
                            .and(v)
                            .for_each(|d, &g, m, v| {
                                *m = b1 * *m + (one - b1) * g;
                                *v = b2 * *v + (one - b2) * g * g;
                                let mhat = *m / bc1;
                                let vhat = *v / bc2;
                                *d = *d - lr * mhat / (vhat.sqrt() + eps);
                            });
                    });
                }
            }
        }
        for p in params {
            p.zero_grad();
        }
    }
}
