//! Learned denoisers used as the proximal step of the unrolled solver.
//!
//! Two flavors with different contracts:
//!
//! * [`UnetProx`] — a small encoder/decoder with batch normalization and
//!   ReLU, plus a global identity residual whose head starts at zero, so an
//!   untrained network is exactly the identity. This is the flavor trained
//!   in experiments; nothing constrains its Lipschitz constant.
//! * [`SmoothProx`] — a plain stack of convolutions with GELU (pointwise,
//!   C¹) and a contraction blend `γ·branch + (1−γ)·input`. After
//!   [`SmoothProx::spectral_normalize`] its end-to-end Lipschitz constant is
//!   certified below a target β < 1, which the fixed-point analysis needs.

pub mod layers;

use crate::autodiff::kernels::{self, ConvDims};
use crate::autodiff::{Binder, BnBatchStats, NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use layers::{BatchNorm2dLayer, Conv2dLayer, DoubleConv, ParamModule};

/// Which denoiser architecture a checkpoint or config refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxFlavor {
    Unet,
    Smooth,
}

/// Common interface the unrolled solver sees: a batched image-to-image map
/// that can run in train (batch statistics) or eval (frozen statistics)
/// mode on a tape.
pub trait ProxNet: ParamModule {
    fn flavor(&self) -> ProxFlavor;
    fn widths(&self) -> &[usize];
    fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId>;

    /// Plain application without gradient bookkeeping (eval mode).
    fn apply(&self, v: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let x = tape.input(v.clone(), "prox-input")?;
        let y = self.forward(&mut tape, &mut binder, x, false)?;
        Ok(tape.value(y).clone())
    }
}

fn check_image_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Contract(format!(
            "denoiser expects [batch, 1, h, w] input, got {shape:?}"
        )));
    }
    Ok(())
}

/// Encoder/decoder denoiser with additive skip connections and a zero-
/// initialized head on a global identity residual.
#[derive(Debug, Clone)]
pub struct UnetProx {
    widths: Vec<usize>,
    encoders: Vec<DoubleConv>,
    up_projs: Vec<Conv2dLayer>,
    decoders: Vec<DoubleConv>,
    head: Conv2dLayer,
    path: String,
}

impl UnetProx {
    /// `widths[i]` is the channel count at depth `i`; the last entry is the
    /// bottleneck. Needs at least two levels.
    pub fn new(path: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "unet needs at least two feature widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("unet feature widths must be positive".into()));
        }
        let levels = widths.len();
        let mut encoders = Vec::with_capacity(levels);
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            encoders.push(DoubleConv::new(&format!("{path}.enc{i}"), cin, w, rng));
            cin = w;
        }
        let mut up_projs = Vec::with_capacity(levels - 1);
        let mut decoders = Vec::with_capacity(levels - 1);
        for i in (0..levels - 1).rev() {
            up_projs.push(Conv2dLayer::kaiming(
                &format!("{path}.up{i}"),
                widths[i],
                widths[i + 1],
                3,
                rng,
            ));
            decoders.push(DoubleConv::new(&format!("{path}.dec{i}"), widths[i], widths[i], rng));
        }
        let head = Conv2dLayer::zeroed(&format!("{path}.head"), 1, widths[0], 3);
        Ok(UnetProx {
            widths: widths.to_vec(),
            encoders,
            up_projs,
            decoders,
            head,
            path: path.to_string(),
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Route recorded batch statistics back into the matching normalization
    /// layers' running averages. Call once per optimizer step.
    pub fn fold_batch_stats(&mut self, stats: &[BnBatchStats<f64>]) {
        for s in stats {
            for enc in &mut self.encoders {
                route_stats(&mut enc.bn1, s);
                route_stats(&mut enc.bn2, s);
            }
            for dec in &mut self.decoders {
                route_stats(&mut dec.bn1, s);
                route_stats(&mut dec.bn2, s);
            }
        }
    }
}

fn route_stats(bn: &mut BatchNorm2dLayer, s: &BnBatchStats<f64>) {
    if bn.path() == s.path {
        bn.fold_stats(&s.mean, &s.var);
    }
}

impl ParamModule for UnetProx {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        for e in &self.encoders {
            e.visit(f);
        }
        for u in &self.up_projs {
            u.visit(f);
        }
        for d in &self.decoders {
            d.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        for e in &mut self.encoders {
            e.visit_mut(f);
        }
        for u in &mut self.up_projs {
            u.visit_mut(f);
        }
        for d in &mut self.decoders {
            d.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl ProxNet for UnetProx {
    fn flavor(&self) -> ProxFlavor {
        ProxFlavor::Unet
    }

    fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        check_image_input(tape.shape(x))?;
        let levels = self.widths.len();
        let mut skips = Vec::with_capacity(levels - 1);
        let mut h = x;
        for (i, enc) in self.encoders.iter().enumerate() {
            h = enc.forward(tape, binder, h, train)?;
            if i + 1 < levels {
                skips.push(h);
                h = tape.avgpool2(h)?;
            }
        }
        for (j, (proj, dec)) in self.up_projs.iter().zip(&self.decoders).enumerate() {
            h = tape.upsample2(h)?;
            h = proj.forward(tape, binder, h)?;
            let skip = skips[levels - 2 - j];
            h = tape.add(h, skip)?;
            h = dec.forward(tape, binder, h, train)?;
        }
        let correction = self.head.forward(tape, binder, h)?;
        tape.add(x, correction)
    }
}

/// Pointwise-C¹ convolutional denoiser with a certified contraction factor.
#[derive(Debug, Clone)]
pub struct SmoothProx {
    layers: Vec<Conv2dLayer>,
    widths: Vec<usize>,
    /// Blend weight: output = γ·branch + (1−γ)·input.
    pub gamma: f64,
    use_gelu: bool,
    beta_certified: Option<f64>,
    path: String,
}

impl SmoothProx {
    /// Four 3×3 convolutions `1 → hidden → hidden → hidden → 1` with GELU
    /// between them.
    pub fn new(path: &str, hidden: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("smooth denoiser needs a positive width".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("blend weight γ={gamma} outside [0, 1]")));
        }
        let chans = [1, hidden, hidden, hidden, 1];
        let layers = chans
            .windows(2)
            .enumerate()
            .map(|(i, io)| Conv2dLayer::kaiming(&format!("{path}.conv{i}"), io[1], io[0], 3, rng))
            .collect();
        Ok(SmoothProx {
            layers,
            widths: vec![hidden],
            gamma,
            use_gelu: true,
            beta_certified: None,
            path: path.to_string(),
        })
    }

    /// Assemble from explicit layers — used by tests that need degenerate
    /// linear networks (no activations, γ = 1).
    pub fn from_layers(path: &str, layers: Vec<Conv2dLayer>, gamma: f64, use_gelu: bool) -> Self {
        SmoothProx {
            layers,
            widths: vec![],
            gamma,
            use_gelu,
            beta_certified: None,
            path: path.to_string(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn layers(&self) -> &[Conv2dLayer] {
        &self.layers
    }

    /// The contraction factor certified by the last normalization, if any.
    pub fn beta_certified(&self) -> Option<f64> {
        self.beta_certified
    }

    /// Reinstate a certificate recorded in a checkpoint manifest.
    pub(crate) fn restore_beta(&mut self, beta: f64) {
        self.beta_certified = Some(beta);
    }

    fn activations(&self) -> usize {
        if self.use_gelu {
            self.layers.len().saturating_sub(1)
        } else {
            0
        }
    }

    /// Spectral norm of one convolution layer on `side`×`side` inputs,
    /// estimated by power iteration on WᵀW.
    pub fn layer_norm(layer: &Conv2dLayer, side: usize, iters: usize, rng: &mut Rng) -> Result<f64> {
        let shape = layer.weight.shape();
        let (co, ci, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        let dims = ConvDims { b: 1, ci, co, h: side, w: side, kh, kw };
        let wt = layer.weight.data();
        let apply = |v: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut out = Tensor::zeros(&[co * side * side]);
            kernels::conv2d_fwd(v.data(), wt, None, out.data_mut(), &dims);
            Ok(out)
        };
        let adjoint = |g: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut dx = Tensor::zeros(&[ci * side * side]);
            kernels::conv2d_bwd_input(g.data(), wt, dx.data_mut(), &dims);
            Ok(dx)
        };
        let res = power_iteration(apply, adjoint, ci * side * side, iters, 1e-9, rng)?;
        Ok(res.sigma)
    }

    /// Rescale every convolution so the product of per-layer spectral norms
    /// (together with the activation Lipschitz factors and the residual
    /// blend) certifies an end-to-end Lipschitz constant ≤ `beta_target`.
    ///
    /// All-zero layers are left untouched with a warning; the branch is then
    /// itself zero, which only tightens the bound.
    pub fn spectral_normalize(
        &mut self,
        beta_target: f64,
        iters: usize,
        side: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        if !(0.0 < beta_target && beta_target < 1.0) {
            return Err(Error::Config(format!("β target {beta_target} must be in (0, 1)")));
        }
        let identity_part = 1.0 - self.gamma;
        if beta_target <= identity_part {
            return Err(Error::Config(format!(
                "β target {beta_target} unreachable: the identity blend alone contributes {identity_part}"
            )));
        }
        // Normalize each layer to unit spectral norm.
        let mut active = 0usize;
        let mut skipped = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.weight.max_abs() == 0.0 {
                skipped.push(i);
                continue;
            }
            let sigma = Self::layer_norm(layer, side, iters, rng)?;
            if sigma == 0.0 {
                skipped.push(i);
                continue;
            }
            layer.weight = layer.weight.scale(1.0 / sigma);
            active += 1;
        }
        for i in &skipped {
            eprintln!("warning: spectral normalization skipped zero layer {i} of {}", self.path);
        }
        if active > 0 {
            // Allowed branch gain once the blend and activations are paid for.
            let act_gain = if self.gamma > 0.0 {
                let lip = kernels::gelu_lipschitz().powi(self.activations() as i32);
                ((beta_target - identity_part) / self.gamma) / lip
            } else {
                // Branch unused; any finite scale certifies.
                beta_target
            };
            let per_layer = act_gain.powf(1.0 / active as f64);
            for layer in self.layers.iter_mut() {
                if layer.weight.max_abs() != 0.0 {
                    layer.weight = layer.weight.scale(per_layer);
                }
            }
        }
        self.beta_certified = Some(beta_target);
        Ok(())
    }
}

impl ParamModule for SmoothProx {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl ProxNet for SmoothProx {
    fn flavor(&self) -> ProxFlavor {
        ProxFlavor::Smooth
    }

    fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let _ = train; // no batch statistics anywhere in this flavor
        check_image_input(tape.shape(x))?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, binder, h)?;
            if self.use_gelu && i < last {
                h = tape.gelu(h)?;
            }
        }
        if self.gamma == 1.0 {
            Ok(h)
        } else {
            tape.lincomb(self.gamma, h, 1.0 - self.gamma, x)
        }
    }
}

/// Empirical lower bound on the Lipschitz constant: the largest expansion
/// ratio seen over random pairs plus short directional probes around them.
pub fn lipschitz_estimate<P: ProxNet + ?Sized>(
    net: &P,
    side: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("lipschitz estimate needs at least one sample".into()));
    }
    let shape = [1usize, 1, side, side];
    let mut best = 0.0f64;
    for _ in 0..samples {
        let u = rng.normal_tensor::<f64>(&shape);
        let v = rng.normal_tensor::<f64>(&shape);
        let du = net.apply(&u)?;
        let dv = net.apply(&v)?;
        let sep = u.sub(&v)?.norm2();
        if sep > 0.0 {
            best = best.max(du.sub(&dv)?.norm2() / sep);
        }
        // Local probe: finite-difference directional derivative.
        let dir = rng.normal_tensor::<f64>(&shape);
        let eps = 1e-4;
        let up = u.add(&dir.scale(eps / dir.norm2()))?;
        let dup = net.apply(&up)?;
        best = best.max(dup.sub(&du)?.norm2() / eps);
    }
    Ok(best)
}
