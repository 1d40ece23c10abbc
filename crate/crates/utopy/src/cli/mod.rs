//! Command-line front end: experiment configs, staged artifact pipeline, and
//! a run manifest per invocation.
//!
//! The pipeline is `make-operators` → `simulate` → `train` → `eval`, with
//! `verify` (contraction/path harness) and `plot-data` (log reshaping) as
//! side commands. Every command reads one JSON config — either `--config
//! <file>` or the built-in `--desk-scale` preset — resolves flag overrides,
//! and writes `manifest-<command>.json` into the output directory so a run
//! can be reproduced from its artifacts alone. With `--workers 1` (the
//! default and only implemented mode), all outputs are deterministic
//! functions of the config and seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{add_awgn, load_dataset, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::operators::{
    make_blur_pair, make_cs_pair, BlurDesign, CsDesign, GaussianBlur, HomotopyFidelity,
    LinearOperator, OperatorDescriptor,
};
use crate::prox::SmoothProx;
use crate::rng::Rng;
use crate::tensor::{io, Tensor};
use crate::theory::{self, certify, trace_path, FixedPointMap};
use crate::train::{
    self, EvalSetting, LossWeights, MetricsLog, SchedulerKind, SchedulerSpec, TrainConfig,
    TrainSetup,
};
use crate::unroll::UnrollModel;

/// Environment variable that overrides `--out` when set.
pub const OUT_ENV: &str = "UTOPY_OUT";

/// Certified contraction factor targeted when `verify` picks its own step
/// size: τ is chosen so that β̂(1 + τ·L̂) lands on this value.
const VERIFY_RHO_TARGET: f64 = 0.9;

// ---------------------------------------------------------------------------
// Argument surface.
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "utopy", version, about = "Homotopy-continuation training for unrolled solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Use the built-in small-scale preset instead of a config file.
    #[arg(long, global = true)]
    pub desk_scale: bool,

    /// Output directory for run artifacts (the UTOPY_OUT environment
    /// variable, when set, wins over this flag).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker count; 1 is fully deterministic and currently the only
    /// implemented mode (larger values are accepted and recorded).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    /// Override the continuation schedule.
    #[arg(long, global = true, value_enum)]
    pub scheduler: Option<SchedulerArg>,

    /// Override the augmented-row ratio (compressed sensing only).
    #[arg(long, global = true)]
    pub eta: Option<f64>,

    /// Override the synthetic blur width (deblurring only).
    #[arg(long, global = true)]
    pub sigma_t: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the measurement/synthetic operator pair and write their
    /// descriptors plus a dimension report.
    MakeOperators,
    /// Stage datasets and measurement caches (y with seeded noise, noiseless
    /// synthetic y_t, achieved SNR report).
    Simulate,
    /// Run the continuation training loop; writes metrics.csv and
    /// checkpoints.
    Train,
    /// Score a trained model across evaluation settings into eval.csv/json.
    Eval,
    /// Trace the fixed-point path of a certified contractive stage across
    /// the continuation grid and check the smoothness bound.
    Verify,
    /// Reshape run logs into plot-ready CSV files (no rendering).
    PlotData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::MakeOperators => "make-operators",
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Verify => "verify",
            Command::PlotData => "plot-data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulerArg {
    Exp,
    Linear,
    Baseline,
}

impl SchedulerArg {
    fn kind(self) -> SchedulerKind {
        match self {
            SchedulerArg::Exp => SchedulerKind::Exponential,
            SchedulerArg::Linear => SchedulerKind::Linear,
            SchedulerArg::Baseline => SchedulerKind::ConstantZero,
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment config.
// ---------------------------------------------------------------------------

/// Complete experiment description. One config drives every subcommand, so a
/// pipeline is reproducible from a single file plus the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Master seed; every random stream in a run derives from it by name.
    pub seed: u64,
    /// Image side; signals have length side².
    pub side: usize,
    pub problem: ProblemSpec,
    pub dataset: DatasetSpec,
    /// Measurement SNR in dB; `null` means noiseless measurements.
    pub snr_db: Option<f64>,
    pub model: ModelSpec,
    pub training: TrainingSpec,
    #[serde(default)]
    pub evaluation: Vec<EvalCase>,
    #[serde(default)]
    pub verify: VerifySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Subsampled-Hadamard compressed sensing; the synthetic operator keeps
    /// the same rows plus an extra `eta`·n of them.
    Cs { m_over_n: f64, eta: f64 },
    /// Gaussian deblurring; the synthetic operator blurs with the narrower
    /// `sigma_t`.
    Blur { sigma: f64, sigma_t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural phantom images.
    Synthetic { train: usize, test: usize },
    /// PGM/PPM files under a directory, split by a seeded shuffle.
    Directory { path: String, train_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxFlavor {
    Unet,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub flavor: ProxFlavor,
    /// Number of unrolled stages.
    pub stages: usize,
    /// Encoder widths (unet flavor).
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Hidden channel count (smooth flavor).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Residual blend weight of the learned branch (smooth flavor).
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Share one denoiser across all stages.
    #[serde(default)]
    pub shared: bool,
}

fn default_hidden() -> usize {
    8
}

fn default_gamma() -> f64 {
    0.9
}

impl ModelSpec {
    fn build(&self, side: usize, rng: &mut Rng) -> Result<UnrollModel> {
        match self.flavor {
            ProxFlavor::Unet => UnrollModel::new_unet(self.stages, side, &self.widths, self.shared, rng),
            ProxFlavor::Smooth => {
                UnrollModel::new_smooth(self.stages, side, self.hidden, self.gamma, self.shared, rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: SchedulerKind,
    /// Epochs between continuation refreshes.
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    /// Fraction of training after which the continuation weight reaches 0.
    #[serde(default = "default_fraction")]
    pub descent_fraction: f64,
    /// Learning-rate halving epochs; empty selects the 40/60/80% marks.
    #[serde(default)]
    pub lr_halving_epochs: Vec<usize>,
    #[serde(default)]
    pub loss: LossWeights,
}

fn default_refresh() -> usize {
    10
}

fn default_fraction() -> f64 {
    SchedulerSpec::DEFAULT_FRACTION
}

impl TrainingSpec {
    fn scheduler_spec(&self) -> Result<SchedulerSpec> {
        SchedulerSpec::new(self.scheduler, self.epochs, self.refresh_every, self.descent_fraction)
    }
}

/// One row of the evaluation table: the trained operator by default, or a
/// same-family operator rebuilt at a different compression/blur level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub label: String,
    /// Compression override (compressed sensing only).
    #[serde(default)]
    pub m_over_n: Option<f64>,
    /// Blur-width override (deblurring only).
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Measurement SNR for this setting; `null` means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

/// Parameters of the `verify` harness. The harness is self-contained: it
/// builds a spectrally normalized smooth stage and a probe fidelity at its
/// own (small) scale, so it does not depend on staged artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    /// End-to-end Lipschitz target for the normalized denoiser.
    pub beta_target: f64,
    /// Gradient step size; `null` picks τ so that β̂(1+τL̂) = 0.9.
    pub tau: Option<f64>,
    /// Probe image side (signals have length side²).
    pub side: usize,
    pub hidden: usize,
    pub gamma: f64,
    /// Relative fixed-point tolerance.
    pub tol: f64,
    pub max_iters: usize,
    /// Grid size for the continuation sweep from α=1 down to α=0.
    pub grid_points: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec {
            beta_target: 0.5,
            tau: None,
            side: 8,
            hidden: 8,
            gamma: 0.9,
            tol: 1e-9,
            max_iters: 20_000,
            grid_points: 21,
        }
    }
}

impl AppConfig {
    /// Small-scale preset: 32×32 synthetic phantoms, 30% Hadamard sampling
    /// with 10% augmented rows, 35 dB noise, a 3-stage [8,16] UNet solver
    /// trained for 60 epochs with the linear schedule.
    pub fn desk() -> AppConfig {
        AppConfig {
            seed: 0,
            side: 32,
            problem: ProblemSpec::Cs { m_over_n: 0.3, eta: 0.1 },
            dataset: DatasetSpec::Synthetic { train: 2000, test: 200 },
            snr_db: Some(35.0),
            model: ModelSpec {
                flavor: ProxFlavor::Unet,
                stages: 3,
                widths: vec![8, 16],
                hidden: default_hidden(),
                gamma: default_gamma(),
                shared: false,
            },
            training: TrainingSpec {
                epochs: 60,
                batch_size: 32,
                learning_rate: 1e-3,
                scheduler: SchedulerKind::Linear,
                refresh_every: default_refresh(),
                descent_fraction: default_fraction(),
                lr_halving_epochs: Vec::new(),
                loss: LossWeights::default(),
            },
            evaluation: Vec::new(),
            verify: VerifySpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.side.is_power_of_two() || self.side < 4 {
            return Err(Error::Config(format!(
                "side {} must be a power of two of at least 4",
                self.side
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config(format!(
                    "snr_db {snr} must be finite (use null for noiseless)"
                )));
            }
        }
        match self.model.flavor {
            ProxFlavor::Unet if self.model.widths.is_empty() => {
                return Err(Error::Config("unet flavor needs at least one encoder width".into()));
            }
            ProxFlavor::Smooth if self.model.hidden == 0 => {
                return Err(Error::Config("smooth flavor needs hidden ≥ 1".into()));
            }
            _ => {}
        }
        if self.model.stages == 0 {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if !(0.0..=1.0).contains(&self.model.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.model.gamma)));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", t.learning_rate)));
        }
        t.scheduler_spec()?;
        t.loss.validate()?;
        let mut labels: Vec<&str> = Vec::new();
        for case in &self.evaluation {
            if case.label.is_empty() {
                return Err(Error::Config("evaluation labels must be non-empty".into()));
            }
            if labels.contains(&case.label.as_str()) {
                return Err(Error::Config(format!("duplicate evaluation label {:?}", case.label)));
            }
            if case.m_over_n.is_some() && case.sigma.is_some() {
                return Err(Error::Config(format!(
                    "evaluation {:?} sets both m_over_n and sigma",
                    case.label
                )));
            }
            match self.problem {
                ProblemSpec::Cs { .. } if case.sigma.is_some() => {
                    return Err(Error::Config(format!(
                        "evaluation {:?}: sigma override does not apply to compressed sensing",
                        case.label
                    )));
                }
                ProblemSpec::Blur { .. } if case.m_over_n.is_some() => {
                    return Err(Error::Config(format!(
                        "evaluation {:?}: m_over_n override does not apply to deblurring",
                        case.label
                    )));
                }
                _ => {}
            }
            labels.push(&case.label);
        }
        let v = &self.verify;
        if !(0.0 < v.beta_target && v.beta_target < 1.0) {
            return Err(Error::Config(format!("verify beta_target {} outside (0, 1)", v.beta_target)));
        }
        if let Some(tau) = v.tau {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::Config(format!("verify tau {tau} must be positive")));
            }
        }
        if !v.side.is_power_of_two() || v.side < 4 {
            return Err(Error::Config(format!("verify side {} must be a power of two of at least 4", v.side)));
        }
        if !(v.tol > 0.0) || v.max_iters == 0 || v.grid_points < 2 || v.hidden == 0 {
            return Err(Error::Config(
                "verify needs tol > 0, max_iters ≥ 1, grid_points ≥ 2 and hidden ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&v.gamma) {
            return Err(Error::Config(format!("verify gamma {} outside [0, 1]", v.gamma)));
        }
        Ok(())
    }

    fn scheduler_label(&self) -> &'static str {
        match self.training.scheduler {
            SchedulerKind::Exponential => "exponential",
            SchedulerKind::Linear => "linear",
            SchedulerKind::ConstantZero => "baseline",
        }
    }
}

/// Resolve the config source (`--config` xor `--desk-scale`) and fold the
/// flag overrides in. Returns the resolved config and the file it came from.
pub fn load_config(cli: &Cli) -> Result<(AppConfig, Option<String>)> {
    let (mut cfg, path) = match (&cli.config, cli.desk_scale) {
        (Some(_), true) => {
            return Err(Error::Config("--config and --desk-scale are mutually exclusive".into()));
        }
        (Some(p), false) => {
            let cfg: AppConfig = read_json(p, "experiment config")?;
            (cfg, Some(p.display().to_string()))
        }
        (None, true) => (AppConfig::desk(), None),
        (None, false) => {
            return Err(Error::Config("no configuration: pass --config <file> or --desk-scale".into()));
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(arg) = cli.scheduler {
        cfg.training.scheduler = arg.kind();
    }
    if let Some(eta) = cli.eta {
        match &mut cfg.problem {
            ProblemSpec::Cs { eta: slot, .. } => *slot = eta,
            ProblemSpec::Blur { .. } => {
                return Err(Error::Config("--eta applies only to compressed sensing".into()));
            }
        }
    }
    if let Some(sigma_t) = cli.sigma_t {
        match &mut cfg.problem {
            ProblemSpec::Blur { sigma_t: slot, .. } => *slot = sigma_t,
            ProblemSpec::Cs { .. } => {
                return Err(Error::Config("--sigma-t applies only to deblurring".into()));
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, path))
}

/// `UTOPY_OUT` beats the flag so wrappers can redirect a whole pipeline
/// without touching each command line.
pub fn resolve_out(env: Option<std::ffi::OsString>, flag: &Path) -> PathBuf {
    match env {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.to_path_buf(),
    }
}

// ---------------------------------------------------------------------------
// Run manifest.
// ---------------------------------------------------------------------------

/// Written once per run: enough to replay the command exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Config file the run started from; absent for the built-in preset.
    pub config_path: Option<String>,
    /// Resolved config snapshot, flag overrides already applied.
    pub config: AppConfig,
    pub seed: u64,
    /// Continuation schedule label; constant-α=0 runs read "baseline".
    pub scheduler: String,
    pub version: String,
    pub out_dir: String,
    pub workers: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Entry points.
// ---------------------------------------------------------------------------

/// Parse-free entry used by the binary and by tests: execute one command and
/// write its manifest.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let started = unix_ms();
    if cli.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let (cfg, config_path) = load_config(&cli)?;
    let out = resolve_out(std::env::var_os(OUT_ENV), &cli.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let ctx = Ctx { cfg, out, workers: cli.workers };
    match cli.command {
        Command::MakeOperators => cmd_make_operators(&ctx)?,
        Command::Simulate => cmd_simulate(&ctx)?,
        Command::Train => cmd_train(&ctx)?,
        Command::Eval => cmd_eval(&ctx)?,
        Command::Verify => cmd_verify(&ctx)?,
        Command::PlotData => cmd_plot_data(&ctx)?,
    }

    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_path,
        seed: ctx.cfg.seed,
        scheduler: ctx.cfg.scheduler_label().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        out_dir: ctx.out.display().to_string(),
        workers: ctx.workers,
        config: ctx.cfg,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    let path = ctx.out.join(format!("manifest-{}.json", manifest.command));
    write_json(&path, &manifest, "run manifest")?;
    Ok(manifest)
}

/// Process entry: run, and on failure print a machine-readable error object
/// to stderr and map the error class to an exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            let payload = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{payload}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: AppConfig,
    out: PathBuf,
    workers: usize,
}

// ---------------------------------------------------------------------------
// make-operators.
// ---------------------------------------------------------------------------

/// Dimension summary written next to the operator descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DimensionReport {
    Cs { n: usize, m: usize, m_t: usize, eta: f64 },
    Blur { side: usize, sigma: f64, sigma_t: f64, half_width: usize, half_width_t: usize },
}

fn build_pair(cfg: &AppConfig) -> Result<(Arc<dyn LinearOperator<f64>>, Arc<dyn LinearOperator<f64>>)> {
    match cfg.problem {
        ProblemSpec::Cs { m_over_n, eta } => {
            let design = CsDesign { n: cfg.side * cfg.side, m_over_n, eta, seed: cfg.seed };
            let (h, ht) = make_cs_pair(&design)?;
            Ok((Arc::new(h), Arc::new(ht)))
        }
        ProblemSpec::Blur { sigma, sigma_t } => {
            let (h, ht) = make_blur_pair(&BlurDesign { sigma, sigma_t }, cfg.side)?;
            Ok((Arc::new(h), Arc::new(ht)))
        }
    }
}

fn cmd_make_operators(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let dir = ctx.out.join("operators");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (h, ht) = build_pair(cfg)?;
    write_json(&dir.join("h.json"), &h.descriptor(), "measurement operator descriptor")?;
    write_json(&dir.join("ht.json"), &ht.descriptor(), "synthetic operator descriptor")?;
    let report = match cfg.problem {
        ProblemSpec::Cs { m_over_n, eta } => {
            let design = CsDesign { n: cfg.side * cfg.side, m_over_n, eta, seed: cfg.seed };
            DimensionReport::Cs { n: design.n, m: design.m(), m_t: design.m_t(), eta }
        }
        ProblemSpec::Blur { sigma, sigma_t } => DimensionReport::Blur {
            side: cfg.side,
            sigma,
            sigma_t,
            half_width: GaussianBlur::new(cfg.side, sigma)?.half_width(),
            half_width_t: GaussianBlur::new(cfg.side, sigma_t)?.half_width(),
        },
    };
    write_json(&dir.join("dimensions.json"), &report, "dimension report")?;
    match report {
        DimensionReport::Cs { n, m, m_t, .. } => {
            println!("operators: {} (n={n}, m={m}) / {} (m_t={m_t})", h.name(), ht.name());
        }
        DimensionReport::Blur { half_width, half_width_t, .. } => {
            println!("operators: {} (r={half_width}) / {} (r_t={half_width_t})", h.name(), ht.name());
        }
    }
    Ok(())
}

fn load_operator_pair(out: &Path) -> Result<(Arc<dyn LinearOperator<f64>>, Arc<dyn LinearOperator<f64>>)> {
    let dir = out.join("operators");
    require(&dir.join("h.json"), "run `utopy make-operators` first")?;
    let h: OperatorDescriptor = read_json(&dir.join("h.json"), "measurement operator descriptor")?;
    let ht: OperatorDescriptor = read_json(&dir.join("ht.json"), "synthetic operator descriptor")?;
    Ok((Arc::from(h.build::<f64>()?), Arc::from(ht.build::<f64>()?)))
}

// ---------------------------------------------------------------------------
// simulate.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub count: usize,
    pub measurements: usize,
    pub synthetic_measurements: usize,
    /// Realized SNR of the noisy cache; absent for noiseless runs (e = 0).
    pub achieved_snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub requested_snr_db: Option<f64>,
    pub splits: Vec<SplitReport>,
}

fn load_datasets(cfg: &AppConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { train, test } => {
            let train_set = synth_dataset(*train, cfg.side, cfg.seed ^ 0xA)?;
            let test_set = synth_dataset(*test, cfg.side, cfg.seed ^ 0xB)?.with_split(Split::Test);
            Ok((train_set, test_set))
        }
        DatasetSpec::Directory { path, train_fraction } => {
            load_dataset(path, cfg.side, *train_fraction, cfg.seed)
        }
    }
}

fn simulate_split(
    set: &Dataset,
    h: &Arc<dyn LinearOperator<f64>>,
    ht: &Arc<dyn LinearOperator<f64>>,
    snr_db: Option<f64>,
    noise: &mut Rng,
) -> Result<(Tensor<f64>, Tensor<f64>, Option<f64>)> {
    let n = set.side() * set.side();
    let flat = set.images().reshaped(&[set.len(), n])?;
    let clean = h.apply(&flat)?;
    let (y, achieved) = match snr_db {
        // The same "…-noise" streams the trainer draws from, so these caches
        // are exactly the measurements training sees.
        Some(snr) => {
            let y = add_awgn(&clean, snr, noise)?;
            (y.clone(), Some(achieved_snr_db(&clean, &y)))
        }
        None => (clean.clone(), None),
    };
    let y_synth = ht.apply(&flat)?;
    Ok((y, y_synth, achieved))
}

fn achieved_snr_db(clean: &Tensor<f64>, noisy: &Tensor<f64>) -> f64 {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (c, y) in clean.data().iter().zip(noisy.data()) {
        signal += c * c;
        noise += (y - c) * (y - c);
    }
    10.0 * (signal / noise).log10()
}

fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (h, ht) = load_operator_pair(&ctx.out)?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let dir = ctx.out.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    train_set.save_cache(dir.join("train"))?;
    test_set.save_cache(dir.join("test"))?;

    let root = Rng::new(cfg.seed);
    let mut splits = Vec::new();
    for (set, tag, stream) in
        [(&train_set, "train", "train-noise"), (&test_set, "test", "test-noise")]
    {
        let mut noise = root.stream(stream);
        let (y, y_synth, achieved) = simulate_split(set, &h, &ht, cfg.snr_db, &mut noise)?;
        io::write_tensor(dir.join(format!("y-{tag}.utns")), &y)?;
        io::write_tensor(dir.join(format!("yt-{tag}.utns")), &y_synth)?;
        splits.push(SplitReport {
            split: tag.to_string(),
            count: set.len(),
            measurements: y.numel() / set.len(),
            synthetic_measurements: y_synth.numel() / set.len(),
            achieved_snr_db: achieved,
        });
    }
    let report = SimulateReport { requested_snr_db: cfg.snr_db, splits };
    write_json(&dir.join("simulate.json"), &report, "simulation report")?;
    for s in &report.splits {
        match s.achieved_snr_db {
            Some(db) => println!(
                "{}: {} samples × {} measurements, achieved snr {db:.2} dB",
                s.split, s.count, s.measurements
            ),
            None => println!(
                "{}: {} samples × {} measurements, noiseless",
                s.split, s.count, s.measurements
            ),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train.
// ---------------------------------------------------------------------------

fn load_cached_datasets(out: &Path) -> Result<(Dataset, Dataset)> {
    let dir = out.join("data");
    require(&dir.join("train.utns"), "run `utopy simulate` first")?;
    require(&dir.join("test.utns"), "run `utopy simulate` first")?;
    Ok((Dataset::load_cache(dir.join("train"))?, Dataset::load_cache(dir.join("test"))?))
}

fn train_config(cfg: &AppConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        scheduler: cfg.training.scheduler_spec()?,
        batch_size: cfg.training.batch_size,
        learning_rate: cfg.training.learning_rate,
        lr_halving_epochs: cfg.training.lr_halving_epochs.clone(),
        seed: cfg.seed,
        snr_db: cfg.snr_db.unwrap_or(f64::INFINITY),
        loss: cfg.training.loss.clone(),
    })
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (h, ht) = load_operator_pair(&ctx.out)?;
    let (train_set, test_set) = load_cached_datasets(&ctx.out)?;
    let mut model_rng = Rng::new(cfg.seed).stream("model-init");
    let model = cfg.model.build(cfg.side, &mut model_rng)?;
    let setup =
        TrainSetup { measurement: h, synthetic: Some(ht), out_dir: Some(ctx.out.clone()) };
    let tc = train_config(cfg)?;
    let (_, log) = train::train(&tc, model, &setup, &train_set, &test_set)?;
    if let Some(last) = log.records().last() {
        println!(
            "trained {} epochs ({}): train psnr {:.2} dB, test psnr {:.2} dB, test ssim {:.4}",
            log.records().len(),
            cfg.scheduler_label(),
            last.train_psnr,
            last.test_psnr,
            last.test_ssim,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval.
// ---------------------------------------------------------------------------

fn eval_settings(ctx: &Ctx) -> Result<Vec<EvalSetting>> {
    let cfg = &ctx.cfg;
    let cases: Vec<EvalCase> = if cfg.evaluation.is_empty() {
        vec![EvalCase { label: "measurement".into(), m_over_n: None, sigma: None, snr_db: cfg.snr_db }]
    } else {
        cfg.evaluation.clone()
    };
    let mut settings = Vec::with_capacity(cases.len());
    for case in cases {
        let operator: Arc<dyn LinearOperator<f64>> = match (case.m_over_n, case.sigma) {
            (Some(fraction), None) => {
                let eta = match cfg.problem {
                    ProblemSpec::Cs { eta, .. } => eta,
                    ProblemSpec::Blur { .. } => unreachable!("validated: cs-only override"),
                };
                let design =
                    CsDesign { n: cfg.side * cfg.side, m_over_n: fraction, eta, seed: cfg.seed };
                Arc::new(make_cs_pair(&design)?.0)
            }
            (None, Some(sigma)) => Arc::new(GaussianBlur::new(cfg.side, sigma)?),
            (None, None) => load_operator_pair(&ctx.out)?.0,
            (Some(_), Some(_)) => unreachable!("validated: mutually exclusive overrides"),
        };
        settings.push(EvalSetting { label: case.label, operator, snr_db: case.snr_db });
    }
    Ok(settings)
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let final_dir = ctx.out.join("final");
    require(&final_dir.join("manifest.json"), "run `utopy train` first")?;
    let model = UnrollModel::load_checkpoint(&final_dir)?;
    let (_, test_set) = load_cached_datasets(&ctx.out)?;
    let settings = eval_settings(ctx)?;
    let table = train::evaluate(&model, &test_set, &settings, cfg.seed)?;
    table.write_csv(ctx.out.join("eval.csv"))?;
    table.write_json(ctx.out.join("eval.json"))?;
    for row in &table.rows {
        println!("{}: psnr {:.2} dB, ssim {:.4}", row.setting, row.mean_psnr, row.mean_ssim);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify.
// ---------------------------------------------------------------------------

fn verify_grid(points: usize) -> Vec<f64> {
    if points == 21 {
        return theory::default_grid();
    }
    let last = (points - 1) as f64;
    (0..points).map(|i| (last - i as f64) / last).collect()
}

fn cmd_verify(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let v = &cfg.verify;
    let root = Rng::new(cfg.seed);

    // Probe fidelity at the harness scale: one phantom measured noiselessly
    // by both operators, so the α-path depends only on the operator mismatch.
    let probe_cfg = AppConfig { side: v.side, ..cfg.clone() };
    let (h, ht) = build_pair(&probe_cfg)?;
    let n = v.side * v.side;
    let x = synth_dataset(1, v.side, cfg.seed)?.images().reshaped(&[n])?;
    let y = h.apply(&x)?;
    let y_t = ht.apply(&x)?;
    let fid = HomotopyFidelity::new(h, y, Some((ht, y_t)))?;

    let mut prox = SmoothProx::new("verify.prox", v.hidden, v.gamma, &mut root.stream("verify-prox"))?;
    prox.spectral_normalize(v.beta_target, 400, v.side, &mut root.stream("verify-normalize"))?;
    let tau = match v.tau {
        Some(tau) => tau,
        None => {
            let probe_map = FixedPointMap::new(prox.clone(), 0.0, v.side)?;
            let cert = certify(&probe_map, &fid, &mut root.stream("verify-certify"))?;
            (VERIFY_RHO_TARGET / cert.beta_hat - 1.0) / cert.l_hat
        }
    };
    let map = FixedPointMap::new(prox, tau, v.side)?;
    let grid = verify_grid(v.grid_points);
    let report = trace_path(&map, &fid, &grid, v.tol, v.max_iters, &mut root.stream("verify-path"))?;

    let dir = ctx.out.join("verify");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    report.write_csv(dir.join("path.csv"))?;
    report.write_json(dir.join("path.json"))?;

    let c = &report.cert;
    println!(
        "certified: beta {:.4}, curvature {:.4}, tau {:.6}, factor {:.4}",
        c.beta_hat, c.l_hat, c.tau, c.rho_cert
    );
    println!(
        "path: {} grid points, max ratio {:.6}, violations {}, sensitivity constant {:.4}",
        report.points.len(),
        report.max_ratio(),
        report.violations(),
        report.eq8_constant,
    );
    if report.failed {
        let alpha = report.points.last().map(|p| p.alpha).unwrap_or(f64::NAN);
        return Err(Error::Numeric(format!(
            "fixed-point sweep stalled at alpha {alpha}; partial report written to {}",
            dir.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plot-data.
// ---------------------------------------------------------------------------

fn cmd_plot_data(ctx: &Ctx) -> Result<()> {
    let metrics = ctx.out.join("metrics.csv");
    require(&metrics, "run `utopy train` first")?;
    let text = std::fs::read_to_string(&metrics)
        .map_err(|e| Error::io(metrics.display().to_string(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricsLog::CSV_HEADER) {
        return Err(Error::Contract(format!("{} has an unexpected header", metrics.display())));
    }
    let mut schedule = String::from("epoch,alpha\n");
    let mut psnr = String::from("epoch,train_psnr,test_psnr\n");
    let mut loss = String::from("epoch,train_loss\n");
    let mut rows = 0usize;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Contract(format!("malformed metrics row: {line:?}")));
        }
        schedule.push_str(&format!("{},{}\n", f[0], f[1]));
        psnr.push_str(&format!("{},{},{}\n", f[0], f[3], f[4]));
        loss.push_str(&format!("{},{}\n", f[0], f[2]));
        rows += 1;
    }
    let dir = ctx.out.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_text(&dir.join("schedule.csv"), &schedule)?;
    write_text(&dir.join("psnr.csv"), &psnr)?;
    write_text(&dir.join("loss.csv"), &loss)?;
    let mut files = 3;

    // Pass the continuation-path diagnostics through when present.
    let path_csv = ctx.out.join("verify").join("path.csv");
    if path_csv.exists() {
        let text = std::fs::read_to_string(&path_csv)
            .map_err(|e| Error::io(path_csv.display().to_string(), e))?;
        let mut out = String::from("alpha,ratio_to_prev,banach_bound\n");
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 5 {
                out.push_str(&format!("{},{},{}\n", f[0], f[3], f[4]));
            }
        }
        write_text(&dir.join("path.csv"), &out)?;
        files += 1;
    }
    println!("wrote {files} plot files covering {rows} epochs to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Small file helpers.
// ---------------------------------------------------------------------------

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{} not found; {hint}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(what, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(what, e))
}

#[cfg(test)]
mod tests;
