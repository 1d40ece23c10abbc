//! The K-stage unrolled reconstruction network.
//!
//! Each stage performs a gradient step on the blended fidelity followed by a
//! learned denoiser and a trainable extrapolation:
//!
//! ```text
//! x^{k+1} = D_{θ^k}(z − τ^k ∇g_α(z))
//! z       = x^{k+1} − t^k (x^{k+1} − x^k)
//! ```
//!
//! The same graph serves training (α > 0, batch statistics live) and
//! deployment inference (α = 0, statistics frozen), so inference is
//! bit-identical to evaluating the training graph at α = 0.

pub mod fista;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, BnBatchStats, NodeId, Tape};
use crate::error::{Error, Result};
use crate::operators::{HomotopyFidelity, LinearOperator};
use crate::prox::{ParamModule, ProxFlavor, ProxNet, SmoothProx, UnetProx};
use crate::rng::Rng;
use crate::tensor::{io, Tensor};

/// Either denoiser flavor, selected per model.
#[derive(Debug, Clone)]
pub enum AnyProx {
    Unet(UnetProx),
    Smooth(SmoothProx),
}

impl AnyProx {
    fn as_net(&self) -> &dyn ProxNet {
        match self {
            AnyProx::Unet(u) => u,
            AnyProx::Smooth(s) => s,
        }
    }

    pub fn flavor(&self) -> ProxFlavor {
        self.as_net().flavor()
    }

    pub fn widths(&self) -> &[usize] {
        self.as_net().widths()
    }
}

impl ParamModule for AnyProx {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        match self {
            AnyProx::Unet(u) => u.visit(f),
            AnyProx::Smooth(s) => s.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        match self {
            AnyProx::Unet(u) => u.visit_mut(f),
            AnyProx::Smooth(s) => s.visit_mut(f),
        }
    }
}

/// Graph handles produced by one unrolled forward pass.
pub struct ForwardTrace {
    /// Final iterate x^K, in the flat measurement-domain shape.
    pub output: NodeId,
    /// Every stage's x^{k+1} when intermediate logging was requested.
    pub stages: Vec<NodeId>,
}

/// K unrolled stages with per-stage trainable step and acceleration scalars.
#[derive(Debug, Clone)]
pub struct UnrollModel {
    proxes: Vec<AnyProx>,
    taus: Vec<Tensor<f64>>,
    ts: Vec<Tensor<f64>>,
    side: usize,
    shared: bool,
}

/// Step-size initialization used throughout the experiments.
pub const TAU_INIT: f64 = 1e-3;

impl UnrollModel {
    /// UNet-flavored model: `widths` are the encoder feature widths.
    pub fn new_unet(
        k: usize,
        side: usize,
        widths: &[usize],
        shared: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(k, side, shared, |path, rng| {
            Ok(AnyProx::Unet(UnetProx::new(path, widths, rng)?))
        }, rng)
    }

    /// Smooth-flavored model for the contraction analysis.
    pub fn new_smooth(
        k: usize,
        side: usize,
        hidden: usize,
        gamma: f64,
        shared: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(k, side, shared, |path, rng| {
            Ok(AnyProx::Smooth(SmoothProx::new(path, hidden, gamma, rng)?))
        }, rng)
    }

    fn build(
        k: usize,
        side: usize,
        shared: bool,
        make: impl Fn(&str, &mut Rng) -> Result<AnyProx>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("unrolled model needs at least one stage".into()));
        }
        if !side.is_power_of_two() {
            return Err(Error::Config(format!("image side {side} must be a power of two")));
        }
        let prox_count = if shared { 1 } else { k };
        let mut proxes = Vec::with_capacity(prox_count);
        for i in 0..prox_count {
            let path = if shared { "shared.prox".to_string() } else { format!("stage{i}.prox") };
            proxes.push(make(&path, rng)?);
        }
        Ok(UnrollModel {
            proxes,
            taus: vec![Tensor::scalar(TAU_INIT); k],
            ts: vec![Tensor::scalar(0.0); k],
            side,
            shared,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.taus.len()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn prox(&self, k: usize) -> &AnyProx {
        if self.shared {
            &self.proxes[0]
        } else {
            &self.proxes[k]
        }
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k].data()[0]
    }

    pub fn t_accel(&self, k: usize) -> f64 {
        self.ts[k].data()[0]
    }

    pub fn set_tau(&mut self, k: usize, v: f64) {
        self.taus[k] = Tensor::scalar(v);
    }

    pub fn set_t_accel(&mut self, k: usize, v: f64) {
        self.ts[k] = Tensor::scalar(v);
    }

    /// Build the full K-stage graph. `x⁰ = z =` blended back-projection,
    /// then each stage applies the gradient/denoise/extrapolate triplet.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        fid: &HomotopyFidelity<f64>,
        alpha: f64,
        train: bool,
        keep_intermediates: bool,
    ) -> Result<ForwardTrace> {
        let n = fid.in_len();
        if self.side * self.side != n {
            return Err(Error::Contract(format!(
                "operator domain {n} does not match configured {0}×{0} images",
                self.side
            )));
        }
        let nodes = fid.bind(tape)?;
        let x0 = fid.adjoint_init_node(tape, &nodes, alpha)?;
        let flat_shape = tape.shape(x0).to_vec();
        let batch = tape.value(x0).numel() / n;

        let mut x_prev = x0;
        let mut z = x0;
        let mut stages = Vec::new();
        for k in 0..self.num_stages() {
            let (x_next, z_next) = (|| -> Result<(NodeId, NodeId)> {
                let g = fid.grad_node(tape, &nodes, z, alpha)?;
                let tau = binder.bind(tape, &format!("stage{k}.tau"), &self.taus[k])?;
                let step = tape.scalar_mul(tau, g)?;
                let pre = tape.sub(z, step)?;
                let img = tape.reshape(pre, vec![batch, 1, self.side, self.side])?;
                let den = self.prox(k).as_net().forward(tape, binder, img, train)?;
                let x_next = tape.reshape(den, flat_shape.clone())?;
                let t = binder.bind(tape, &format!("stage{k}.t"), &self.ts[k])?;
                let diff = tape.sub(x_next, x_prev)?;
                let corr = tape.scalar_mul(t, diff)?;
                let z_next = tape.sub(x_next, corr)?;
                Ok((x_next, z_next))
            })()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("stage {k}: {msg}")),
                other => other,
            })?;
            x_prev = x_next;
            z = z_next;
            if keep_intermediates {
                stages.push(x_next);
            }
        }
        Ok(ForwardTrace { output: x_prev, stages })
    }

    /// Evaluate the network once (eval mode) and return x̂_α^K.
    pub fn reconstruct(&self, fid: &HomotopyFidelity<f64>, alpha: f64) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let trace = self.forward_tape(&mut tape, &mut binder, fid, alpha, false, false)?;
        Ok(tape.value(trace.output).clone())
    }

    /// One stage applied to explicit iterates (eval mode): returns
    /// `(x_next, z_next)`.
    pub fn unroll_step(
        &self,
        k: usize,
        fid: &HomotopyFidelity<f64>,
        alpha: f64,
        x_prev: &Tensor<f64>,
        z: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Tensor<f64>)> {
        if k >= self.num_stages() {
            return Err(Error::Contract(format!(
                "stage {k} out of range for a {}-stage model",
                self.num_stages()
            )));
        }
        let n = fid.in_len();
        let batch = z.numel() / n;
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let nodes = fid.bind(&mut tape)?;
        let result = (|| -> Result<(NodeId, NodeId)> {
            let zp = tape.input(z.clone(), "z")?;
            let xp = tape.input(x_prev.clone(), "x-prev")?;
            let g = fid.grad_node(&mut tape, &nodes, zp, alpha)?;
            let tau = binder.bind(&mut tape, &format!("stage{k}.tau"), &self.taus[k])?;
            let step = tape.scalar_mul(tau, g)?;
            let pre = tape.sub(zp, step)?;
            let img = tape.reshape(pre, vec![batch, 1, self.side, self.side])?;
            let den = self.prox(k).as_net().forward(&mut tape, &mut binder, img, false)?;
            let x_next = tape.reshape(den, z.shape().to_vec())?;
            let t = binder.bind(&mut tape, &format!("stage{k}.t"), &self.ts[k])?;
            let diff = tape.sub(x_next, xp)?;
            let corr = tape.scalar_mul(t, diff)?;
            let z_next = tape.sub(x_next, corr)?;
            Ok((x_next, z_next))
        })()
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("stage {k}: {msg}")),
            other => other,
        })?;
        Ok((tape.value(result.0).clone(), tape.value(result.1).clone()))
    }

    /// Deployment entry point: reconstruct from a measurement alone. No
    /// synthetic operator is involved anywhere in the computation.
    pub fn infer(
        &self,
        h: Arc<dyn LinearOperator<f64>>,
        y: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        let fid = HomotopyFidelity::new(h, y.clone(), None)?;
        self.reconstruct(&fid, 0.0)
    }

    /// Route one training step's recorded batch statistics into running
    /// averages.
    pub fn fold_batch_stats(&mut self, stats: &[BnBatchStats<f64>]) {
        for p in &mut self.proxes {
            if let AnyProx::Unet(u) = p {
                u.fold_batch_stats(stats);
            }
        }
    }

    fn manifest(&self) -> CheckpointManifest {
        let flavor = self.proxes[0].flavor();
        let gamma = match &self.proxes[0] {
            AnyProx::Smooth(s) => Some(s.gamma),
            AnyProx::Unet(_) => None,
        };
        let beta_target = match &self.proxes[0] {
            AnyProx::Smooth(s) => s.beta_certified(),
            AnyProx::Unet(_) => None,
        };
        let mut tensors = Vec::new();
        self.visit(&mut |path, _t, _trainable| tensors.push(path.to_string()));
        CheckpointManifest {
            flavor,
            widths: self.proxes[0].widths().to_vec(),
            activation: match flavor {
                ProxFlavor::Unet => "relu".into(),
                ProxFlavor::Smooth => "gelu".into(),
            },
            k: self.num_stages(),
            tau: (0..self.num_stages()).map(|k| self.tau(k)).collect(),
            t: (0..self.num_stages()).map(|k| self.t_accel(k)).collect(),
            beta_target,
            gamma,
            side: self.side,
            shared: self.shared,
            tensors,
        }
    }

    /// Write `manifest.json` plus one tensor file per parameter under `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = self.manifest();
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("checkpoint manifest", e))?;
        std::fs::write(dir.join("manifest.json"), json)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut result = Ok(());
        self.visit(&mut |path, t, _trainable| {
            if result.is_ok() {
                result = io::write_tensor(dir.join(format!("{path}.utns")), t);
            }
        });
        result
    }

    /// Rebuild a model from [`UnrollModel::save_checkpoint`] output. The
    /// tensor payload round-trips bitwise.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let m: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::json("checkpoint manifest", e))?;
        if m.tau.len() != m.k || m.t.len() != m.k {
            return Err(Error::Contract(format!(
                "checkpoint manifest stage count {} does not match {} step sizes",
                m.k,
                m.tau.len()
            )));
        }
        // Structure first (seeded arbitrarily), then overwrite every tensor.
        let mut rng = Rng::new(0).stream("checkpoint-restore");
        let mut model = match m.flavor {
            ProxFlavor::Unet => UnrollModel::new_unet(m.k, m.side, &m.widths, m.shared, &mut rng)?,
            ProxFlavor::Smooth => UnrollModel::new_smooth(
                m.k,
                m.side,
                *m.widths.first().ok_or_else(|| {
                    Error::Contract("smooth checkpoint missing width".into())
                })?,
                m.gamma.unwrap_or(1.0),
                m.shared,
                &mut rng,
            )?,
        };
        for (k, (&tau, &t)) in m.tau.iter().zip(&m.t).enumerate() {
            model.set_tau(k, tau);
            model.set_t_accel(k, t);
        }
        if let (AnyProx::Smooth(s), Some(beta)) = (&mut model.proxes[0], m.beta_target) {
            s.restore_beta(beta);
        }
        let mut expected = Vec::new();
        model.visit(&mut |path, _t, _| expected.push(path.to_string()));
        if expected != m.tensors {
            return Err(Error::Contract(format!(
                "checkpoint tensor list does not match the rebuilt structure: \
                 manifest has {} tensors, model has {}",
                m.tensors.len(),
                expected.len()
            )));
        }
        let mut failure = None;
        model.visit_mut(&mut |path, t, _| {
            if failure.is_some() {
                return;
            }
            match io::read_tensor::<f64>(dir.join(format!("{path}.utns"))) {
                Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Ok(loaded) => {
                    failure = Some(Error::Contract(format!(
                        "checkpoint tensor {path} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        t.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}

impl ParamModule for UnrollModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, bool)) {
        for p in &self.proxes {
            p.visit(f);
        }
        for (k, tau) in self.taus.iter().enumerate() {
            f(&format!("stage{k}.tau"), tau, true);
        }
        for (k, t) in self.ts.iter().enumerate() {
            f(&format!("stage{k}.t"), t, true);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, bool)) {
        for p in &mut self.proxes {
            p.visit_mut(f);
        }
        for (k, tau) in self.taus.iter_mut().enumerate() {
            f(&format!("stage{k}.tau"), tau, true);
        }
        for (k, t) in self.ts.iter_mut().enumerate() {
            f(&format!("stage{k}.t"), t, true);
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CheckpointManifest {
    flavor: ProxFlavor,
    widths: Vec<usize>,
    activation: String,
    k: usize,
    tau: Vec<f64>,
    t: Vec<f64>,
    beta_target: Option<f64>,
    gamma: Option<f64>,
    side: usize,
    shared: bool,
    tensors: Vec<String>,
}

#[cfg(test)]
mod tests;
