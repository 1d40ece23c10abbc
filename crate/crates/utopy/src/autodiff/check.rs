//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares analytic parameter gradients against central differences of f.
///
/// `f` maps the parameter list to a scalar; `params` are the evaluation
/// point; `analytic` are the claimed gradients, one per parameter. Returns
/// the maximum over all coordinates of
/// |analytic - central difference| / (|analytic| + eps_mach).
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-diff check: step {step} must be positive")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "finite-diff check: {} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut point: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Contract(format!(
                "finite-diff check: gradient {pi} shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            point[pi].data_mut()[i] = orig + step;
            let fp = eval_finite(&mut f, &point)?;
            point[pi].data_mut()[i] = orig - step;
            let fm = eval_finite(&mut f, &point)?;
            point[pi].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / (a.abs() + f64::EPSILON);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn eval_finite<F>(f: &mut F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let v = f(point)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("finite-diff check: objective returned {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let w = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let grad = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let err = finite_diff_check(|p| Ok(p[0].data()[0] * p[0].data()[0]), &[w], &[grad], 1e-5).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn injected_ten_percent_fault_is_reported() {
        let w = Tensor::from_vec(&[1], vec![1.3]).unwrap();
        let wrong = Tensor::from_vec(&[1], vec![2.0 * 1.3 * 1.1]).unwrap();
        let err = finite_diff_check(|p| Ok(p[0].data()[0] * p[0].data()[0]), &[w], &[wrong], 1e-5).unwrap();
        assert!((err - 0.1 / 1.1).abs() < 1e-3, "err = {err}");
    }

    #[test]
    fn non_finite_objective_is_a_numeric_error() {
        let w = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let grad = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let r = finite_diff_check(|p| Ok(p[0].data()[0].sqrt()), &[w], &[grad], 1e-5);
        assert!(matches!(r, Err(crate::error::Error::Numeric(_))));
    }

    #[test]
    fn multi_parameter_gradients_are_checked_jointly() {
        // f(u, v) = sum(u^2) + 3 * sum(u * v)
        let u = Tensor::from_vec(&[2], vec![0.7, -0.4]).unwrap();
        let v = Tensor::from_vec(&[2], vec![0.2, 1.5]).unwrap();
        let gu = Tensor::from_vec(&[2], vec![2.0 * 0.7 + 3.0 * 0.2, 2.0 * -0.4 + 3.0 * 1.5]).unwrap();
        let gv = Tensor::from_vec(&[2], vec![3.0 * 0.7, 3.0 * -0.4]).unwrap();
        let f = |p: &[Tensor<f64>]| {
            let (u, v) = (&p[0], &p[1]);
            Ok(u.dot(u).unwrap() + 3.0 * u.dot(v).unwrap())
        };
        let err = finite_diff_check(f, &[u, v], &[gu, gv], 1e-6).unwrap();
        assert!(err < 1e-7, "err = {err}");
    }
}
