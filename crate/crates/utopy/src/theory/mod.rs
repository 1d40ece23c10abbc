//! Empirical verification that the blended-fidelity iteration is a
//! contraction and that its fixed points move smoothly with the blend α.
//!
//! The object of study is the single-stage map
//!
//! ```text
//! T_α(x) = D(x − τ ∇g_α(x))
//! ```
//!
//! with a spectrally-bounded smooth denoiser `D`. When `β(1 + τL) < 1`
//! (β the denoiser's Lipschitz bound, L the largest fidelity curvature over
//! the α range), each `T_α` has a unique fixed point and adjacent fixed
//! points along an α path obey the contraction perturbation bound
//! `‖x̂_{α₁} − x̂_{α₂}‖ ≤ ‖T_{α₁}(x̂_{α₂}) − x̂_{α₂}‖ / (1 − ρ)`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::operators::HomotopyFidelity;
use crate::prox::{ProxNet, SmoothProx};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One contraction stage: a certified smooth denoiser after a τ-gradient step.
#[derive(Debug, Clone)]
pub struct FixedPointMap {
    prox: SmoothProx,
    tau: f64,
    side: usize,
}

impl FixedPointMap {
    pub fn new(prox: SmoothProx, tau: f64, side: usize) -> Result<Self> {
        if tau < 0.0 || !tau.is_finite() {
            return Err(Error::Contract(format!("fixed-point map: invalid step size {tau}")));
        }
        if side == 0 {
            return Err(Error::Contract("fixed-point map: side must be positive".into()));
        }
        Ok(FixedPointMap { prox, tau, side })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn prox(&self) -> &SmoothProx {
        &self.prox
    }

    /// One application of `T_α` to a flat `[n]` (or batched `[b, n]`) iterate.
    pub fn apply(
        &self,
        fid: &HomotopyFidelity<f64>,
        alpha: f64,
        x: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        let n = self.side * self.side;
        if x.numel() % n != 0 {
            return Err(Error::Contract(format!(
                "fixed-point map: iterate has {} entries, expected a multiple of {n}",
                x.numel()
            )));
        }
        let batch = x.numel() / n;
        let mut v = x.clone();
        let g = fid.grad(x, alpha)?;
        v.axpy(-self.tau, &g)?;
        let img = v.reshaped(&[batch, 1, self.side, self.side])?;
        let den = self.prox.apply(&img)?;
        den.reshaped(x.shape())
    }
}

/// Certified contraction data: the denoiser bound β̂, the largest fidelity
/// curvature L̂ over α ∈ [0, 1], the step τ, and the resulting factor
/// ρ = β̂(1 + τL̂).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionCert {
    pub beta_hat: f64,
    pub l_hat: f64,
    pub tau: f64,
    pub rho_cert: f64,
}

impl ContractionCert {
    pub fn is_contractive(&self) -> bool {
        self.rho_cert < 1.0
    }

    /// The smooth-path constant `τL / (1 − β(1 − τL))` as displayed in the
    /// source analysis; returned as ∞ when its denominator is non-positive.
    pub fn eq8_constant(&self) -> f64 {
        let denom = 1.0 - self.beta_hat * (1.0 - self.tau * self.l_hat);
        if denom <= 0.0 {
            f64::INFINITY
        } else {
            self.tau * self.l_hat / denom
        }
    }

    /// The four step-size/contraction quantities whose published forms
    /// disagree with one another, reported side by side.
    pub fn diagnostics(&self) -> ContractionDiagnostics {
        let (b, t, l) = (self.beta_hat, self.tau, self.l_hat);
        ContractionDiagnostics {
            rho_product: b * (1.0 + t * l),
            rho_sum: b + t * l,
            tau_limit_scaled: if b * l > 0.0 { (1.0 - b) / (b * l) } else { f64::INFINITY },
            tau_limit_plain: if l > 0.0 { (1.0 - b) / l } else { f64::INFINITY },
            path_denominator: 1.0 - b * (1.0 - t * l),
            jacobian_floor: 1.0 - b - t * l,
        }
    }
}

/// Mutually inconsistent published contraction quantities, all evaluated on
/// the same estimates so a reader can compare them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionDiagnostics {
    pub rho_product: f64,
    pub rho_sum: f64,
    pub tau_limit_scaled: f64,
    pub tau_limit_plain: f64,
    pub path_denominator: f64,
    pub jacobian_floor: f64,
}

/// Build the certificate for a map over a blended fidelity: β̂ from the
/// denoiser's spectral certificate and L̂ from power iteration on the
/// fidelity Hessian at both ends of the α range (curvature is affine in α,
/// so the endpoints dominate).
pub fn certify(
    map: &FixedPointMap,
    fid: &HomotopyFidelity<f64>,
    rng: &mut Rng,
) -> Result<ContractionCert> {
    let beta_hat = map.prox.beta_certified().ok_or_else(|| {
        Error::MissingPrerequisite(
            "contraction certificate needs a spectrally-normalized denoiser".into(),
        )
    })?;
    let n = fid.in_len();
    let mut l_hat = 0.0f64;
    let alphas = if fid.synthetic().is_some() { vec![0.0, 1.0] } else { vec![0.0] };
    for alpha in alphas {
        let sigma = power_iteration(
            |v| fid.hessian_apply(v, alpha),
            |v| fid.hessian_apply(v, alpha),
            n,
            300,
            1e-12,
            &mut rng.stream("curvature"),
        )?
        .sigma;
        l_hat = l_hat.max(sigma);
    }
    let tau = map.tau();
    Ok(ContractionCert { beta_hat, l_hat, tau, rho_cert: beta_hat * (1.0 + tau * l_hat) })
}

/// Outcome of one fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub x: Tensor<f64>,
    pub iters: usize,
    pub residuals: Vec<f64>,
}

fn solve(
    map: &FixedPointMap,
    fid: &HomotopyFidelity<f64>,
    alpha: f64,
    x0: &Tensor<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(FixedPointResult, bool)> {
    if tol <= 0.0 || max_iters == 0 {
        return Err(Error::Contract(format!(
            "fixed-point solve: need positive tolerance and iterations, got {tol}, {max_iters}"
        )));
    }
    let mut x = x0.clone();
    let mut residuals = Vec::new();
    for iter in 0..max_iters {
        let next = map.apply(fid, alpha, &x)?;
        let res = next.sub(&x)?.norm2();
        if !res.is_finite() {
            return Err(Error::Numeric(format!(
                "fixed-point solve diverged at alpha {alpha}, iteration {iter}"
            )));
        }
        let accept = res <= tol * (1.0 + x.norm2());
        residuals.push(res);
        x = next;
        if accept {
            return Ok((FixedPointResult { x, iters: iter, residuals }, true));
        }
    }
    Ok((FixedPointResult { x, iters: max_iters, residuals }, false))
}

/// Iterate `T_α` from `x0` until `‖x_{j+1} − x_j‖ ≤ tol·(1 + ‖x_j‖)`.
///
/// When a certificate is supplied the contraction precondition
/// `β̂(1 + τL̂) < 1` is enforced up front; non-convergence within
/// `max_iters` is an error carrying the last residual.
pub fn fixed_point(
    map: &FixedPointMap,
    fid: &HomotopyFidelity<f64>,
    alpha: f64,
    x0: &Tensor<f64>,
    tol: f64,
    max_iters: usize,
    cert: Option<&ContractionCert>,
) -> Result<FixedPointResult> {
    if let Some(c) = cert {
        if !c.is_contractive() {
            return Err(Error::Precondition(format!(
                "contraction not certified: beta {} * (1 + tau {} * L {}) = {} >= 1",
                c.beta_hat, c.tau, c.l_hat, c.rho_cert
            )));
        }
    }
    let (result, converged) = solve(map, fid, alpha, x0, tol, max_iters)?;
    if converged {
        Ok(result)
    } else {
        Err(Error::NonConvergence {
            context: format!(
                "fixed point at alpha {alpha}: residual {} after {max_iters} iterations",
                result.residuals.last().copied().unwrap_or(f64::NAN)
            ),
            iters: max_iters,
        })
    }
}

/// Empirical contraction factor: the largest displacement ratio
/// `‖T_α(u) − T_α(v)‖ / ‖u − v‖` over sampled pairs (half far apart, half
/// nearby to probe the local slope).
pub fn contraction_factor(
    map: &FixedPointMap,
    fid: &HomotopyFidelity<f64>,
    alpha: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::Contract(format!(
            "contraction estimate needs at least 2 samples, got {samples}"
        )));
    }
    let n = fid.in_len();
    let mut rho = 0.0f64;
    for i in 0..samples {
        let u = rng.normal_tensor::<f64>(&[n]);
        let v = if i % 2 == 0 {
            rng.normal_tensor::<f64>(&[n])
        } else {
            let mut v = u.clone();
            v.axpy(1e-4, &rng.normal_tensor::<f64>(&[n]))?;
            v
        };
        let gap = u.sub(&v)?.norm2();
        if gap == 0.0 {
            continue;
        }
        let tu = map.apply(fid, alpha, &u)?;
        let tv = map.apply(fid, alpha, &v)?;
        rho = rho.max(tu.sub(&tv)?.norm2() / gap);
    }
    Ok(rho)
}

/// One α grid point of a traced fixed-point path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub alpha: f64,
    pub iters: usize,
    /// Final solve residual.
    pub residual: f64,
    /// `‖x̂_α − x̂_prev‖ / |Δα|` against the previous grid point.
    pub ratio_to_prev: Option<f64>,
    /// Contraction perturbation bound on the same ratio.
    pub banach_bound: Option<f64>,
    /// The informational smooth-path constant (same for every row).
    pub eq8_bound: f64,
    pub violation: bool,
    pub converged: bool,
}

/// Full path trace: certificate estimates, per-point ratios and bounds, and
/// whether any solve failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub grid: Vec<f64>,
    pub points: Vec<PathPoint>,
    pub cert: ContractionCert,
    pub diagnostics: ContractionDiagnostics,
    pub eq8_constant: f64,
    pub failed: bool,
}

impl PathReport {
    pub const CSV_HEADER: &'static str =
        "alpha,iters,residual,ratio_to_prev,banach_bound,eq8_bound,violation";

    pub fn max_ratio(&self) -> f64 {
        self.points.iter().filter_map(|p| p.ratio_to_prev).fold(0.0, f64::max)
    }

    pub fn violations(&self) -> usize {
        self.points.iter().filter(|p| p.violation).count()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.alpha,
                p.iters,
                p.residual,
                opt(p.ratio_to_prev),
                opt(p.banach_bound),
                p.eq8_bound,
                p.violation
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("path report", e))?;
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// The default 21-point α grid from 1 down to 0.
pub fn default_grid() -> Vec<f64> {
    (0..21).map(|i| 1.0 - i as f64 / 20.0).collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 1.0 || *grid.last().unwrap() != 0.0 {
        return Err(Error::Contract(format!(
            "path grid must run from 1 to 0, got {:?}",
            grid
        )));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Contract("path grid must be strictly decreasing".into()));
    }
    Ok(())
}

/// Warm-started fixed-point sweep over an α grid with per-pair smoothness
/// ratios checked against the contraction perturbation bound. A
/// non-converging grid point yields a partial report with `failed` set
/// rather than an error.
pub fn trace_path(
    map: &FixedPointMap,
    fid: &HomotopyFidelity<f64>,
    grid: &[f64],
    tol: f64,
    max_iters: usize,
    rng: &mut Rng,
) -> Result<PathReport> {
    validate_grid(grid)?;
    let cert = certify(map, fid, rng)?;
    if !cert.is_contractive() {
        return Err(Error::Precondition(format!(
            "cannot trace fixed-point path: certified factor {} >= 1",
            cert.rho_cert
        )));
    }
    let eq8 = cert.eq8_constant();
    let mut report = PathReport {
        grid: grid.to_vec(),
        points: Vec::with_capacity(grid.len()),
        cert,
        diagnostics: cert.diagnostics(),
        eq8_constant: eq8,
        failed: false,
    };

    let mut warm = fid.adjoint_init(grid[0])?;
    let mut prev: Option<(f64, Tensor<f64>)> = None;
    for &alpha in grid {
        let (result, converged) = solve(map, fid, alpha, &warm, tol, max_iters)?;
        let residual = result.residuals.last().copied().unwrap_or(0.0);
        let mut point = PathPoint {
            alpha,
            iters: result.iters,
            residual,
            ratio_to_prev: None,
            banach_bound: None,
            eq8_bound: eq8,
            violation: false,
            converged,
        };
        if !converged {
            report.points.push(point);
            report.failed = true;
            break;
        }
        if let Some((prev_alpha, prev_x)) = &prev {
            let dalpha = (prev_alpha - alpha).abs();
            let ratio = result.x.sub(prev_x)?.norm2() / dalpha;
            // ‖fix T_α − fix T_prev‖ ≤ ‖T_α(fix T_prev) − fix T_prev‖ / (1 − ρ).
            let drift = map.apply(fid, alpha, prev_x)?.sub(prev_x)?.norm2();
            let bound = drift / (1.0 - report.cert.rho_cert) / dalpha;
            point.ratio_to_prev = Some(ratio);
            point.banach_bound = Some(bound);
            // Tiny slack for the tol-level error in both fixed points.
            point.violation = ratio > bound + 10.0 * tol / dalpha;
        }
        report.points.push(point);
        warm = result.x.clone();
        prev = Some((alpha, result.x));
    }
    Ok(report)
}

/// One epoch-to-epoch step of the training-time path monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub epoch: usize,
    pub delta_alpha: f64,
    pub delta_x: f64,
    /// Set when the preceding epoch is missing from the log.
    pub gap: bool,
}

/// Turn a per-epoch log of (epoch, α, probe reconstruction) into the
/// (Δα, ‖Δx‖) series used to visualize solution drift during training. One
/// row per sample; the first row has zero deltas. No pass/fail judgement is
/// attached — weight updates move the solution in ways the fixed-point
/// analysis does not cover.
pub fn training_path_monitor(samples: &[(usize, f64, Tensor<f64>)]) -> Result<Vec<MonitorRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for (i, (epoch, alpha, x)) in samples.iter().enumerate() {
        if i == 0 {
            rows.push(MonitorRow { epoch: *epoch, delta_alpha: 0.0, delta_x: 0.0, gap: false });
            continue;
        }
        let (prev_epoch, prev_alpha, prev_x) = &samples[i - 1];
        if epoch <= prev_epoch {
            return Err(Error::Contract(format!(
                "path monitor: epochs must increase, got {prev_epoch} then {epoch}"
            )));
        }
        rows.push(MonitorRow {
            epoch: *epoch,
            delta_alpha: (alpha - prev_alpha).abs(),
            delta_x: x.sub(prev_x)?.norm2(),
            gap: epoch - prev_epoch > 1,
        });
    }
    Ok(rows)
}

pub fn monitor_csv(rows: &[MonitorRow]) -> String {
    let mut s = String::from("epoch,delta_alpha,delta_x,gap\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.delta_alpha, r.delta_x, r.gap);
    }
    s
}
