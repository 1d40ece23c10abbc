//! Parameter-holding building blocks shared by the denoiser flavors.

use crate::autodiff::{Binder, NodeId, Tape};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Visits every tensor a module owns. `trainable` distinguishes weights from
/// state such as running normalization statistics (state is checkpointed but
/// never receives gradients).
pub trait ParamModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A 3×3 (or any odd-sized) convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor<f64>,
    pub bias: Option<Tensor<f64>>,
    path: String,
}

impl Conv2dLayer {
    /// Kaiming-style initialization scaled for the fan-in.
    pub fn kaiming(path: &str, co: usize, ci: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        Conv2dLayer {
            weight: rng.normal_tensor::<f64>(&[co, ci, k, k]).scale(std),
            bias: Some(Tensor::zeros(&[co])),
            path: path.to_string(),
        }
    }

    /// All-zero weights and bias (used for heads that must start inert).
    pub fn zeroed(path: &str, co: usize, ci: usize, k: usize) -> Self {
        Conv2dLayer {
            weight: Tensor::zeros(&[co, ci, k, k]),
            bias: Some(Tensor::zeros(&[co])),
            path: path.to_string(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn forward(&self, tape: &mut Tape<f64>, binder: &mut Binder, x: NodeId) -> Result<NodeId> {
        let w = binder.bind(tape, &join(&self.path, "weight"), &self.weight)?;
        let b = match &self.bias {
            Some(bias) => Some(binder.bind(tape, &join(&self.path, "bias"), bias)?),
            None => None,
        };
        tape.conv2d(x, w, b)
    }
}

impl ParamModule for Conv2dLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        f(&join(&self.path, "weight"), &self.weight, true);
        if let Some(b) = &self.bias {
            f(&join(&self.path, "bias"), b, true);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        f(&join(&self.path, "weight"), &mut self.weight, true);
        if let Some(b) = &mut self.bias {
            f(&join(&self.path, "bias"), b, true);
        }
    }
}

/// Per-channel batch normalization with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer {
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
    pub running_mean: Tensor<f64>,
    pub running_var: Tensor<f64>,
    pub eps: f64,
    pub momentum: f64,
    path: String,
}

impl BatchNorm2dLayer {
    pub fn new(path: &str, channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            path: path.to_string(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let g = binder.bind(tape, &join(&self.path, "gamma"), &self.gamma)?;
        let b = binder.bind(tape, &join(&self.path, "beta"), &self.beta)?;
        if train {
            tape.batchnorm_train(x, g, b, self.eps, &self.path)
        } else {
            tape.batchnorm_eval(x, g, b, self.running_mean.clone(), self.running_var.clone(), self.eps)
        }
    }

    /// Exponential-moving-average update from one batch's statistics.
    pub fn fold_stats(&mut self, mean: &Tensor<f64>, var: &Tensor<f64>) {
        let m = self.momentum;
        self.running_mean = self.running_mean.scale(1.0 - m).add(&mean.scale(m)).expect("channel shape");
        self.running_var = self.running_var.scale(1.0 - m).add(&var.scale(m)).expect("channel shape");
    }
}

impl ParamModule for BatchNorm2dLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        f(&join(&self.path, "gamma"), &self.gamma, true);
        f(&join(&self.path, "beta"), &self.beta, true);
        f(&join(&self.path, "running-mean"), &self.running_mean, false);
        f(&join(&self.path, "running-var"), &self.running_var, false);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        f(&join(&self.path, "gamma"), &mut self.gamma, true);
        f(&join(&self.path, "beta"), &mut self.beta, true);
        f(&join(&self.path, "running-mean"), &mut self.running_mean, false);
        f(&join(&self.path, "running-var"), &mut self.running_var, false);
    }
}

/// conv → norm → relu, twice. The standard UNet level body.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNorm2dLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2dLayer,
}

impl DoubleConv {
    pub fn new(path: &str, ci: usize, co: usize, rng: &mut Rng) -> Self {
        let mut conv1 = Conv2dLayer::kaiming(&join(path, "conv1"), co, ci, 3, rng);
        let mut conv2 = Conv2dLayer::kaiming(&join(path, "conv2"), co, co, 3, rng);
        // Normalization supplies the shift, so conv bias is redundant.
        conv1.bias = None;
        conv2.bias = None;
        DoubleConv {
            conv1,
            bn1: BatchNorm2dLayer::new(&join(path, "bn1"), co),
            conv2,
            bn2: BatchNorm2dLayer::new(&join(path, "bn2"), co),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let h = self.conv1.forward(tape, binder, x)?;
        let h = self.bn1.forward(tape, binder, h, train)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, binder, h)?;
        let h = self.bn2.forward(tape, binder, h, train)?;
        tape.relu(h)
    }
}

impl ParamModule for DoubleConv {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}
