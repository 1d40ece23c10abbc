//! Classical FISTA baseline minimizing ½‖y − Hx‖² + λ‖Wx‖₁, where W is the
//! full orthonormal 2-D Haar transform. Serves as a learned-free reference
//! and as a correctness oracle for the unrolled solver's building blocks.

use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::operators::LinearOperator;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wavelet;

/// Soft-thresholding (shrinkage) scalar: `sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Result of a FISTA run.
pub struct FistaReport {
    /// Final iterate, same shape as the operator domain.
    pub x: Tensor<f64>,
    /// Objective value per iteration (including the starting point).
    pub objective: Vec<f64>,
    /// Momentum restarts triggered by objective increases.
    pub restarts: usize,
}

fn objective(
    h: &dyn LinearOperator<f64>,
    y: &Tensor<f64>,
    x: &Tensor<f64>,
    lambda: f64,
    side: usize,
    levels: usize,
) -> Result<f64> {
    let r = h.apply(x)?.sub(y)?;
    let data_term = 0.5 * r.dot(&r)?;
    if lambda == 0.0 {
        return Ok(data_term);
    }
    let img = x.reshaped(&[x.numel() / (side * side), side, side])?;
    let coeffs = wavelet::haar2_forward(&img, levels)?;
    let l1: f64 = coeffs.data().iter().map(|v| v.abs()).sum();
    Ok(data_term + lambda * l1)
}

fn prox_step(v: &Tensor<f64>, threshold: f64, side: usize, levels: usize) -> Result<Tensor<f64>> {
    if threshold == 0.0 {
        return Ok(v.clone());
    }
    let img = v.reshaped(&[v.numel() / (side * side), side, side])?;
    let mut coeffs = wavelet::haar2_forward(&img, levels)?;
    for c in coeffs.data_mut() {
        *c = soft_threshold(*c, threshold);
    }
    wavelet::haar2_inverse(&coeffs, levels)?.reshaped(v.shape())
}

/// Accelerated proximal gradient descent with a monotone safeguard and
/// function-value restarts. Diverging runs (objective above 10× the initial
/// value) abort with a numeric-failure error.
pub fn fista_classical(
    h: &dyn LinearOperator<f64>,
    y: &Tensor<f64>,
    lambda: f64,
    iters: usize,
) -> Result<FistaReport> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("regularization weight λ={lambda} must be ≥ 0")));
    }
    if iters == 0 {
        return Err(Error::Contract("fista needs at least one iteration".into()));
    }
    let n = h.in_len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || !side.is_power_of_two() {
        return Err(Error::Contract(format!(
            "fista prior needs a square power-of-two image domain, got n={n}"
        )));
    }
    let levels = wavelet::max_levels(side);

    // Step size from the spectral norm of H (L = σ_max²).
    let mut rng = Rng::new(0x5f1_57a).stream("fista-step");
    let pi = power_iteration(
        |v: &Tensor<f64>| h.apply(v),
        |v: &Tensor<f64>| h.adjoint(v),
        n,
        200,
        1e-10,
        &mut rng,
    )?;
    let lipschitz = (pi.sigma * pi.sigma).max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;

    let mut x = h.adjoint(y)?;
    let mut z = x.clone();
    let mut theta = 1.0f64;
    let mut restarts = 0usize;
    let f0 = objective(h, y, &x, lambda, side, levels)?;
    let mut objective_trace = Vec::with_capacity(iters + 1);
    objective_trace.push(f0);
    let mut f_prev = f0;

    for _ in 0..iters {
        let grad = h.adjoint(&h.apply(&z)?.sub(y)?)?;
        let mut v = z.clone();
        v.axpy(-step, &grad)?;
        let candidate = prox_step(&v, lambda * step, side, levels)?;
        let f_cand = objective(h, y, &candidate, lambda, side, levels)?;
        if !f_cand.is_finite() || f_cand > 10.0 * f0.max(f64::MIN_POSITIVE) {
            return Err(Error::Numeric(format!(
                "fista diverged: objective {f_cand} exceeds 10× the initial {f0}"
            )));
        }

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if f_cand <= f_prev {
            let momentum = (theta - 1.0) / theta_next;
            z = candidate.clone();
            z.axpy(momentum, &candidate.sub(&x)?)?;
            x = candidate;
            f_prev = f_cand;
            theta = theta_next;
        } else {
            // Monotone safeguard: keep the best iterate, restart momentum.
            z = x.clone();
            theta = 1.0;
            restarts += 1;
        }
        objective_trace.push(f_prev);
    }
    Ok(FistaReport { x, objective: objective_trace, restarts })
}
