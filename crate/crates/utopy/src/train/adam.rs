//! Adam with bias correction, keyed by parameter path.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor<f64>,
    v: Tensor<f64>,
}

/// First/second-moment optimizer state. Each parameter is identified by its
/// binding path, so the same state object serves a whole model regardless of
/// how its tensors are stored.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    /// Standard coefficients: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new() -> Self {
        Self::with_params(0.9, 0.999, 1e-8)
    }

    pub fn with_params(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, moments: HashMap::new() }
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// the per-parameter updates that belong to it.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// In-place update of one parameter tensor from its gradient.
    pub fn update(
        &mut self,
        path: &str,
        param: &mut Tensor<f64>,
        grad: &Tensor<f64>,
        lr: f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Contract(
                "optimizer: begin_step must be called before update".into(),
            ));
        }
        if param.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "optimizer: parameter {path} has shape {:?} but gradient has {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let entry = self.moments.entry(path.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        if entry.m.shape() != param.shape() {
            return Err(Error::Contract(format!(
                "optimizer: parameter {path} changed shape mid-run"
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(entry.m.data_mut().iter_mut().zip(entry.v.data_mut().iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
