//! Continuation training: anneal the fidelity blend α from 1 to 0 on a
//! schedule while optimizing the unrolled network end to end, so early epochs
//! fit an easy synthetic problem and late epochs fit the real one. The
//! constant-zero schedule recovers conventional training of the same network.

pub mod adam;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, NodeId, Tape};
use crate::data::{add_awgn, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::operators::{HomotopyFidelity, LinearOperator};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::adam::Adam;
use crate::prox::ParamModule;
use crate::unroll::UnrollModel;

/// How α decays over epochs. `ConstantZero` is the conventional-training
/// baseline: the blend is off for the entire run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    Exponential,
    Linear,
    ConstantZero,
}

/// Blend schedule: α starts at 1, decays to (numerically) zero by
/// `fraction · max_epochs`, and is refreshed only every `freq` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    pub max_epochs: usize,
    /// Epochs between α refreshes; the value is held in between.
    pub freq: usize,
    /// Fraction of the run after which α must be ≈ 0.
    pub fraction: f64,
}

impl SchedulerSpec {
    pub const DEFAULT_FRACTION: f64 = 0.7;

    pub fn new(kind: SchedulerKind, max_epochs: usize, freq: usize, fraction: f64) -> Result<Self> {
        let spec = SchedulerSpec { kind, max_epochs, freq, fraction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Contract("scheduler: max_epochs must be positive".into()));
        }
        if self.freq == 0 {
            return Err(Error::Contract("scheduler: freq must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "scheduler: fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    /// Epoch at which the schedule reaches zero.
    fn zero_epoch(&self) -> f64 {
        self.fraction * self.max_epochs as f64
    }

    /// The instantaneous schedule value, ignoring the refresh cadence.
    ///
    /// Exponential: `exp(−εℓ)` with `ε = ln(10⁸) / (fraction·max_epochs)`, so
    /// the curve passes through 1e-8 at the zero epoch and is snapped to exactly
    /// 0 from there on. Linear: `1 − ℓ/(fraction·max_epochs)`, clamped at 0.
    pub fn ramp(&self, epoch: usize) -> f64 {
        let l = epoch as f64;
        let zero = self.zero_epoch();
        match self.kind {
            SchedulerKind::ConstantZero => 0.0,
            SchedulerKind::Linear => (1.0 - l / zero).clamp(0.0, 1.0),
            SchedulerKind::Exponential => {
                if l >= zero {
                    0.0
                } else {
                    let eps = (1e8f64).ln() / zero;
                    (-eps * l).exp().clamp(0.0, 1.0)
                }
            }
        }
    }

    /// The blend used at a given epoch: the ramp sampled at the most recent
    /// refresh epoch, so the value changes only when `epoch % freq == 0`.
    pub fn alpha(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch > self.max_epochs {
            return Err(Error::Contract(format!(
                "scheduler: epoch {epoch} exceeds max_epochs {}",
                self.max_epochs
            )));
        }
        Ok(self.ramp(epoch - epoch % self.freq))
    }
}

/// Weights of the three reconstruction-loss terms plus the inner radius of
/// the high-pass frequency window (as a fraction of Nyquist).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub w_freq: f64,
    pub radius_frac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_l1: 0.8, w_ssim: 0.2, w_freq: 0.02, radius_frac: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_l1 < 0.0 || self.w_ssim < 0.0 || self.w_freq < 0.0 {
            return Err(Error::Contract("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.radius_frac) {
            return Err(Error::Contract(format!(
                "frequency-window radius fraction {} outside [0, 1]",
                self.radius_frac
            )));
        }
        Ok(())
    }
}

/// Binary high-pass window over an unshifted 2-D spectrum: 1 where the signed
/// frequency radius is at least `radius_frac · Nyquist`, 0 below (so DC is
/// always excluded for positive radii).
pub fn frequency_mask(h: usize, w: usize, radius_frac: f64) -> Tensor<f64> {
    let nyquist = (h.min(w) / 2) as f64;
    let cutoff = radius_frac * nyquist;
    let mut data = Vec::with_capacity(h * w);
    for u in 0..h {
        let fu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
        for v in 0..w {
            let fv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
            data.push(if fu.hypot(fv) >= cutoff { 1.0 } else { 0.0 });
        }
    }
    Tensor::from_vec(&[h, w], data).expect("mask shape")
}

/// Differentiable composite reconstruction loss on `[b, c, h, w]` nodes:
///
/// `w_l1 · mean|a−b| + w_ssim · (1 − SSIM(a,b)) + w_freq · mean_b ‖W ⊙ |F(a−b)|‖₂`
///
/// where `F` is the orthonormal 2-D DFT per image and `W` the high-pass
/// window. Intended for values in [0, 1]; images must be at least 11×11 for
/// the SSIM window.
pub fn composite_loss_node(
    tape: &mut Tape<f64>,
    a: NodeId,
    b: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 {
        return Err(Error::Contract(format!(
            "composite loss: need [b, c, h, w] inputs, got {shape:?}"
        )));
    }
    let (batch, chans, h, wd) = (shape[0], shape[1], shape[2], shape[3]);

    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;

    let sim = tape.ssim(
        a,
        b,
        metrics::SSIM_WINDOW,
        metrics::SSIM_SIGMA,
        metrics::SSIM_C1,
        metrics::SSIM_C2,
    )?;
    let one = tape.input(Tensor::scalar(1.0), "one")?;
    let dissim = tape.lincomb(1.0, one, -1.0, sim)?;

    let spectrum = tape.fft2_magnitude(diff)?;
    let plane = frequency_mask(h, wd, w.radius_frac);
    let mut mask_data = Vec::with_capacity(batch * chans * h * wd);
    for _ in 0..batch * chans {
        mask_data.extend_from_slice(plane.data());
    }
    let mask = Tensor::from_vec(&shape, mask_data)?;
    let windowed = tape.mask_mul(spectrum, mask)?;
    let rows = tape.reshape(windowed, vec![batch, chans * h * wd])?;
    let norms = tape.l2_per_row(rows)?;
    let freq = tape.mean(norms)?;

    let partial = tape.lincomb(w.w_l1, l1, w.w_ssim, dissim)?;
    tape.lincomb(1.0, partial, w.w_freq, freq)
}

/// Convenience evaluation of the composite loss on plain tensors.
pub fn composite_loss(a: &Tensor<f64>, b: &Tensor<f64>, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let an = tape.input(a.clone(), "a")?;
    let bn = tape.input(b.clone(), "b")?;
    let loss = composite_loss_node(&mut tape, an, bn, w)?;
    Ok(tape.scalar(loss))
}

/// Everything the optimization loop needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheduler: SchedulerSpec,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is halved; empty selects the default
    /// 40% / 60% / 80% marks.
    pub lr_halving_epochs: Vec<usize>,
    pub seed: u64,
    pub snr_db: f64,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Contract("training: batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Contract(format!(
                "training: learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// The halving epochs in effect (explicit list, or the default marks).
    pub fn halving_epochs(&self) -> Vec<usize> {
        if !self.lr_halving_epochs.is_empty() {
            return self.lr_halving_epochs.clone();
        }
        let m = self.scheduler.max_epochs as f64;
        [0.4, 0.6, 0.8].iter().map(|f| (f * m).round() as usize).collect()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.halving_epochs().iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub train_loss: f64,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub seconds: f64,
}

/// Append-only per-epoch log with a fixed CSV projection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str =
        "epoch,alpha,train_loss,train_psnr,test_psnr,test_ssim,seconds";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if record.epoch != self.records.len() {
            return Err(Error::Contract(format!(
                "metrics log: expected epoch {}, got {}",
                self.records.len(),
                record.epoch
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.alpha, r.train_loss, r.train_psnr, r.test_psnr, r.test_ssim, r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Operators and output location for a training run. `synthetic` is required
/// by any schedule that can produce α > 0 and ignored by the constant-zero
/// baseline (which must never touch it).
pub struct TrainSetup {
    pub measurement: Arc<dyn LinearOperator<f64>>,
    pub synthetic: Option<Arc<dyn LinearOperator<f64>>>,
    pub out_dir: Option<PathBuf>,
}

struct MeasuredSet {
    images: Tensor<f64>,
    y: Tensor<f64>,
    y_synth: Option<Tensor<f64>>,
    count: usize,
}

fn measure_set(
    set: &Dataset,
    h: &Arc<dyn LinearOperator<f64>>,
    synth: Option<&Arc<dyn LinearOperator<f64>>>,
    snr_db: f64,
    noise: &mut Rng,
) -> Result<MeasuredSet> {
    let n = set.side() * set.side();
    let flat = set.images().reshaped(&[set.len(), n])?;
    let clean = h.apply(&flat)?;
    let y = add_awgn(&clean, snr_db, noise)?;
    let y_synth = match synth {
        Some(op) => Some(op.apply(&flat)?),
        None => None,
    };
    Ok(MeasuredSet { images: set.images().clone(), y, y_synth, count: set.len() })
}

impl MeasuredSet {
    fn gather(&self, indices: &[usize], side: usize) -> Result<(Tensor<f64>, Tensor<f64>, Option<Tensor<f64>>)> {
        let area = side * side;
        let rows = |t: &Tensor<f64>| -> Tensor<f64> {
            let width = t.numel() / self.count;
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            Tensor::from_vec(&[indices.len(), width], data).expect("gather shape")
        };
        let mut gt = rows(&self.images);
        gt = gt.reshaped(&[indices.len(), 1, side, side])?;
        debug_assert_eq!(gt.numel(), indices.len() * area);
        Ok((gt, rows(&self.y), self.y_synth.as_ref().map(rows)))
    }
}

fn mean_image_psnr(out: &Tensor<f64>, gt: &Tensor<f64>, side: usize) -> Result<f64> {
    let area = side * side;
    let count = out.numel() / area;
    let mut acc = 0.0;
    for i in 0..count {
        let o = Tensor::from_vec(&[side, side], out.data()[i * area..(i + 1) * area].to_vec())?;
        let g = Tensor::from_vec(&[side, side], gt.data()[i * area..(i + 1) * area].to_vec())?;
        acc += metrics::psnr(&o, &g, 1.0)?;
    }
    Ok(acc / count as f64)
}

fn mean_image_ssim(out: &Tensor<f64>, gt: &Tensor<f64>, side: usize) -> Result<f64> {
    let area = side * side;
    let count = out.numel() / area;
    let mut acc = 0.0;
    for i in 0..count {
        let o = Tensor::from_vec(&[side, side], out.data()[i * area..(i + 1) * area].to_vec())?;
        let g = Tensor::from_vec(&[side, side], gt.data()[i * area..(i + 1) * area].to_vec())?;
        acc += metrics::ssim(&o, &g)?;
    }
    Ok(acc / count as f64)
}

fn abort_with_checkpoint(
    model: &UnrollModel,
    out_dir: Option<&Path>,
    epoch: usize,
    batch: usize,
    msg: String,
) -> Error {
    if let Some(dir) = out_dir {
        let ckpt = dir.join(format!("abort-epoch{epoch:04}-batch{batch:04}"));
        if std::fs::create_dir_all(&ckpt).is_ok() {
            let _ = model.save_checkpoint(&ckpt);
        }
    }
    Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}"))
}

/// Run the continuation training loop and return the trained model with its
/// per-epoch log. Deterministic for a fixed config and `--workers 1`-style
/// sequential execution; on a numeric failure the last good model is
/// checkpointed and the error names the epoch and batch.
pub fn train(
    cfg: &TrainConfig,
    mut model: UnrollModel,
    setup: &TrainSetup,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(UnrollModel, MetricsLog)> {
    cfg.validate()?;
    if train_set.len() == 0 || test_set.len() == 0 {
        return Err(Error::MissingPrerequisite("training needs non-empty datasets".into()));
    }
    let side = model.side();
    if train_set.side() != side || test_set.side() != side {
        return Err(Error::Contract(format!(
            "training: dataset side {} does not match model side {side}",
            train_set.side()
        )));
    }
    if setup.measurement.in_len() != side * side {
        return Err(Error::Contract(format!(
            "training: operator expects {} inputs but images have {} pixels",
            setup.measurement.in_len(),
            side * side
        )));
    }
    let needs_synth = cfg.scheduler.kind != SchedulerKind::ConstantZero;
    if needs_synth && setup.synthetic.is_none() {
        return Err(Error::MissingPrerequisite(
            "the chosen schedule blends toward a synthetic fidelity; provide its operator".into(),
        ));
    }
    // The baseline must never evaluate the synthetic operator, so it is only
    // consulted when the schedule can actually produce α > 0.
    let synth = if needs_synth { setup.synthetic.as_ref() } else { None };

    let root = Rng::new(cfg.seed);
    let mut train_noise = root.stream("train-noise");
    let mut test_noise = root.stream("test-noise");
    let measured_train =
        measure_set(train_set, &setup.measurement, synth, cfg.snr_db, &mut train_noise)?;
    let measured_test =
        measure_set(test_set, &setup.measurement, None, cfg.snr_db, &mut test_noise)?;

    let out_dir = setup.out_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut optimizer = Adam::new();
    let mut log = MetricsLog::new();

    for epoch in 0..cfg.scheduler.max_epochs {
        let start = Instant::now();
        let alpha = cfg.scheduler.alpha(epoch)?;
        let lr = cfg.lr_at(epoch);

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        root.stream("shuffle").substream(epoch as u64).shuffle(&mut order);

        let mut loss_acc = 0.0;
        let mut psnr_acc = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |msg: String, m: &UnrollModel| {
                abort_with_checkpoint(m, out_dir, epoch, batch_idx, msg)
            };
            let (gt, y, y_synth) = measured_train.gather(chunk, side)?;
            let synthetic_pair = match (&synth, y_synth) {
                (Some(op), Some(ys)) => Some((Arc::clone(*op), ys)),
                _ => None,
            };
            let fid = HomotopyFidelity::new(Arc::clone(&setup.measurement), y, synthetic_pair)?;

            let mut tape = Tape::new();
            let mut binder = Binder::new(true);
            let trace = model
                .forward_tape(&mut tape, &mut binder, &fid, alpha, true, false)
                .map_err(|e| fail(e.to_string(), &model))?;
            let out_img = tape
                .reshape(trace.output, vec![chunk.len(), 1, side, side])
                .map_err(|e| fail(e.to_string(), &model))?;
            let gt_node = tape.input(gt.clone(), "target")?;
            let loss = composite_loss_node(&mut tape, out_img, gt_node, &cfg.loss)
                .map_err(|e| fail(e.to_string(), &model))?;
            let loss_v = tape.scalar(loss);
            if !loss_v.is_finite() {
                return Err(fail(format!("loss became non-finite ({loss_v})"), &model));
            }

            psnr_acc += mean_image_psnr(tape.value(out_img), &gt, side)? * chunk.len() as f64;
            loss_acc += loss_v * chunk.len() as f64;
            seen += chunk.len();

            let grads = tape.backward(loss).map_err(|e| fail(e.to_string(), &model))?;
            let mut grad_by_path: Vec<(String, Tensor<f64>)> = Vec::new();
            for (path, id) in binder.bound() {
                if let Some(g) = grads.get(id) {
                    grad_by_path.push((path.to_string(), g.clone()));
                }
            }
            let stats = tape.bn_batch_stats().to_vec();
            drop(tape);

            optimizer.begin_step();
            let mut update_err = None;
            model.visit_mut(&mut |path, tensor, trainable| {
                if !trainable || update_err.is_some() {
                    return;
                }
                if let Some((_, g)) = grad_by_path.iter().find(|(p, _)| p == path) {
                    if let Err(e) = optimizer.update(path, tensor, g, lr) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(fail(e.to_string(), &model));
            }
            model.fold_batch_stats(&stats);
        }

        let (test_psnr, test_ssim) =
            evaluate_measured(&model, &measured_test, &setup.measurement, side)?;

        let record = EpochRecord {
            epoch,
            alpha,
            train_loss: loss_acc / seen as f64,
            train_psnr: psnr_acc / seen as f64,
            test_psnr,
            test_ssim,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.push(record)?;

        if let Some(dir) = out_dir {
            log.write_csv(dir.join("metrics.csv"))?;
            if epoch % cfg.scheduler.freq == 0 {
                let ckpt = dir.join(format!("epoch-{epoch:04}"));
                std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(ckpt.display().to_string(), e))?;
                model.save_checkpoint(&ckpt)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        let final_dir = dir.join("final");
        std::fs::create_dir_all(&final_dir).map_err(|e| Error::io(final_dir.display().to_string(), e))?;
        model.save_checkpoint(&final_dir)?;
    }
    Ok((model, log))
}

fn evaluate_measured(
    model: &UnrollModel,
    set: &MeasuredSet,
    h: &Arc<dyn LinearOperator<f64>>,
    side: usize,
) -> Result<(f64, f64)> {
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let indices: Vec<usize> = (0..set.count).collect();
    for chunk in indices.chunks(64) {
        let (gt, y, _) = set.gather(chunk, side)?;
        let fid = HomotopyFidelity::new(Arc::clone(h), y, None)?;
        let out = model.reconstruct(&fid, 0.0)?;
        psnr_acc += mean_image_psnr(&out, &gt, side)? * chunk.len() as f64;
        ssim_acc += mean_image_ssim(&out, &gt, side)? * chunk.len() as f64;
    }
    Ok((psnr_acc / set.count as f64, ssim_acc / set.count as f64))
}

/// One evaluation setting: an operator variant plus an optional measurement
/// SNR (None measures noiselessly).
pub struct EvalSetting {
    pub label: String,
    pub operator: Arc<dyn LinearOperator<f64>>,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub setting: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Per-setting generalization summary produced by [`evaluate`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub const CSV_HEADER: &'static str = "setting,mean_psnr,mean_ssim";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.setting, r.mean_psnr, r.mean_ssim);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("evaluation table", e))?;
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Deployment-mode evaluation (α = 0) of a trained model across operator /
/// noise settings: mean PSNR and SSIM over the test set for each.
pub fn evaluate(
    model: &UnrollModel,
    test_set: &Dataset,
    settings: &[EvalSetting],
    seed: u64,
) -> Result<EvalTable> {
    let side = model.side();
    if test_set.side() != side {
        return Err(Error::Contract(format!(
            "evaluation: dataset side {} does not match model side {side}",
            test_set.side()
        )));
    }
    let n = side * side;
    let flat = test_set.images().reshaped(&[test_set.len(), n])?;
    let mut rows = Vec::with_capacity(settings.len());
    for (idx, setting) in settings.iter().enumerate() {
        if setting.operator.in_len() != n {
            return Err(Error::Contract(format!(
                "evaluation setting {}: operator expects {} inputs, images have {n} pixels",
                setting.label,
                setting.operator.in_len()
            )));
        }
        let clean = setting.operator.apply(&flat)?;
        let y = match setting.snr_db {
            Some(snr) => {
                let mut rng = Rng::new(seed).stream("eval-noise").substream(idx as u64);
                add_awgn(&clean, snr, &mut rng)?
            }
            None => clean,
        };
        let set = MeasuredSet {
            images: test_set.images().clone(),
            y,
            y_synth: None,
            count: test_set.len(),
        };
        let (mean_psnr, mean_ssim) = evaluate_measured(model, &set, &setting.operator, side)?;
        rows.push(EvalRow { setting: setting.label.clone(), mean_psnr, mean_ssim });
    }
    Ok(EvalTable { rows })
}
