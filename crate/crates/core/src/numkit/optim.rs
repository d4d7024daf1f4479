use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{param}` (element {index})")]
    NonFiniteGradient { param: String, index: usize },
    #[error("gradient for `{param}` has shape {got:?}, parameter has {want:?}")]
    ShapeMismatch {
        param: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("expected {want} gradients, got {got}")]
    Count { want: usize, got: usize },
}

/// Adam with L2 weight decay added to the gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
    ) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Count {
                want: params.len(),
                got: grads.len(),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    param: name.to_string(),
                    got: g.shape().to_vec(),
                    want: p.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    param: name.to_string(),
                    index,
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bias1 = c(1.0 - self.beta1.powi(t));
        let bias2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps, wd) = (c(self.lr), c(self.eps), c(self.weight_decay));
        let one = T::one();

        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k] + wd * *w;
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Min,
    Max,
}

impl MetricMode {
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        match self {
            MetricMode::Min => candidate < best,
            MetricMode::Max => candidate > best,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    mode: MetricMode,
    best: Option<f64>,
    epochs_since_improve: usize,
}

impl PlateauScheduler {
    pub fn new(mode: MetricMode) -> Self {
        Self::with(mode, 0.5, 5)
    }

    pub fn with(mode: MetricMode, factor: f64, patience: usize) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0, 1)");
        Self {
            factor,
            patience,
            mode,
            best: None,
            epochs_since_improve: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn epochs_since_improve(&self) -> usize {
        self.epochs_since_improve
    }

    /// Returns the (possibly reduced) learning rate.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = self.best.is_none_or(|b| self.mode.improves(metric, b));
        if improved {
            self.best = Some(metric);
            self.epochs_since_improve = 0;
            return lr;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve >= self.patience {
            self.epochs_since_improve = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
