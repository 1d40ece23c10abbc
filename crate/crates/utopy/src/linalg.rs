//! Largest-singular-value estimation for black-box linear maps.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct PowerIterResult {
    /// Estimated largest singular value.
    pub sigma: f64,
    pub iters: usize,
    /// False when the iteration budget ran out before the estimate settled.
    pub converged: bool,
    /// True when the operator annihilated the probe vectors.
    pub zero_operator: bool,
}

/// Power iteration on `AᵀA` for a map `A` given as apply/adjoint closures
/// over flat tensors of length `dim`.
pub fn power_iteration<T, F, G>(
    apply: F,
    adjoint: G,
    dim: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<PowerIterResult>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    G: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut v: Tensor<T> = rng.normal_tensor(&[dim]);
    let nv = v.norm2();
    if nv == T::zero() {
        v = Tensor::full(&[dim], T::of_f64(1.0 / (dim as f64).sqrt()));
    } else {
        v = v.scale(T::one() / nv);
    }

    let mut sigma_prev = f64::NAN;
    let mut restarted = false;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let w = apply(&v)?;
        let sigma = w.norm2().into_f64();
        if sigma == 0.0 {
            if restarted {
                return Ok(PowerIterResult { sigma: 0.0, iters, converged: true, zero_operator: true });
            }
            // One fresh probe in case the start vector hit the null space.
            restarted = true;
            v = rng.normal_tensor(&[dim]);
            let n = v.norm2();
            if n == T::zero() {
                return Ok(PowerIterResult { sigma: 0.0, iters, converged: true, zero_operator: true });
            }
            v = v.scale(T::one() / n);
            continue;
        }
        let u = adjoint(&w)?;
        let nu = u.norm2();
        if nu == T::zero() {
            return Ok(PowerIterResult { sigma: 0.0, iters, converged: true, zero_operator: true });
        }
        v = u.scale(T::one() / nu);
        if sigma_prev.is_finite() && (sigma - sigma_prev).abs() <= tol * sigma.max(1e-300) {
            return Ok(PowerIterResult { sigma, iters, converged: true, zero_operator: false });
        }
        sigma_prev = sigma;
    }
    Ok(PowerIterResult { sigma: sigma_prev, iters, converged: false, zero_operator: false })
}
