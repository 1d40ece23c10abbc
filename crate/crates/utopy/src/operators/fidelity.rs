//! Blended data fidelity
//! g_alpha(x) = (1-alpha) * 1/2 ||y - Hx||^2 + alpha * 1/2 ||y_t - H_t x||^2
//! over a measurement pair (H, y) and an optional better-posed synthetic
//! pair (H_t, y_t).
//!
//! At alpha = 0 every code path reduces to the plain measurement fidelity
//! and never touches the synthetic pair — neither arithmetic nor operator
//! accesses — so deployment inference is structurally independent of it.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::operators::LinearOperator;
use crate::tensor::{Scalar, Tensor};

pub struct SyntheticPart<T: Scalar> {
    pub h_t: Arc<dyn LinearOperator<T>>,
    pub y_t: Tensor<T>,
}

pub struct HomotopyFidelity<T: Scalar> {
    h: Arc<dyn LinearOperator<T>>,
    y: Tensor<T>,
    synthetic: Option<SyntheticPart<T>>,
}

/// Graph handles for the measurement tensors, bound once per tape.
#[derive(Clone, Copy)]
pub struct FidelityNodes {
    y: NodeId,
    y_t: Option<NodeId>,
}

impl<T: Scalar> HomotopyFidelity<T> {
    pub fn new(
        h: Arc<dyn LinearOperator<T>>,
        y: Tensor<T>,
        synthetic: Option<(Arc<dyn LinearOperator<T>>, Tensor<T>)>,
    ) -> Result<Self> {
        check_measurement(&*h, &y, "measurement")?;
        let synthetic = match synthetic {
            Some((h_t, y_t)) => {
                check_measurement(&*h_t, &y_t, "synthetic")?;
                if h_t.in_len() != h.in_len() {
                    return Err(Error::Contract(format!(
                        "fidelity: synthetic operator domain {} differs from measurement domain {}",
                        h_t.in_len(),
                        h.in_len()
                    )));
                }
                if lead_count(&y_t, h_t.out_len()) != lead_count(&y, h.out_len()) {
                    return Err(Error::Contract(
                        "fidelity: measurement and synthetic batches differ in size".into(),
                    ));
                }
                Some(SyntheticPart { h_t, y_t })
            }
            None => None,
        };
        Ok(HomotopyFidelity { h, y, synthetic })
    }

    pub fn measurement_op(&self) -> &Arc<dyn LinearOperator<T>> {
        &self.h
    }

    pub fn measurement(&self) -> &Tensor<T> {
        &self.y
    }

    pub fn synthetic(&self) -> Option<&SyntheticPart<T>> {
        self.synthetic.as_ref()
    }

    pub fn in_len(&self) -> usize {
        self.h.in_len()
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!("fidelity: alpha={alpha} outside [0, 1]")));
        }
        if alpha > 0.0 && self.synthetic.is_none() {
            return Err(Error::Contract(format!(
                "fidelity: alpha={alpha} requires a synthetic pair, none was provided"
            )));
        }
        Ok(())
    }

    /// g_alpha(x), summed over the batch.
    pub fn objective(&self, x: &Tensor<T>, alpha: f64) -> Result<T> {
        self.check_alpha(alpha)?;
        let half = T::of_f64(0.5);
        let g0 = {
            let r = self.h.apply(x)?.sub(&self.y)?;
            half * r.dot(&r)?
        };
        if alpha == 0.0 {
            return Ok(g0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let g1 = {
            let r = syn.h_t.apply(x)?.sub(&syn.y_t)?;
            half * r.dot(&r)?
        };
        let a = T::of_f64(alpha);
        Ok((T::one() - a) * g0 + a * g1)
    }

    /// Exact gradient of `objective`:
    /// alpha * H_t'(H_t x - y_t) + (1 - alpha) * H'(Hx - y).
    pub fn grad(&self, x: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        self.check_alpha(alpha)?;
        let g0 = self.h.adjoint(&self.h.apply(x)?.sub(&self.y)?)?;
        if alpha == 0.0 {
            return Ok(g0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let g1 = syn.h_t.adjoint(&syn.h_t.apply(x)?.sub(&syn.y_t)?)?;
        let a = T::of_f64(alpha);
        Ok(blend(T::one() - a, &g0, a, &g1))
    }

    /// Blended adjoint back-projection alpha * H_t' y_t + (1 - alpha) * H' y.
    pub fn adjoint_init(&self, alpha: f64) -> Result<Tensor<T>> {
        self.check_alpha(alpha)?;
        let b0 = self.h.adjoint(&self.y)?;
        if alpha == 0.0 {
            return Ok(b0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let b1 = syn.h_t.adjoint(&syn.y_t)?;
        let a = T::of_f64(alpha);
        Ok(blend(T::one() - a, &b0, a, &b1))
    }

    /// Action of the Hessian alpha * H_t'H_t + (1 - alpha) * H'H on v;
    /// its largest eigenvalue is the gradient's Lipschitz constant.
    pub fn hessian_apply(&self, v: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        self.check_alpha(alpha)?;
        let g0 = self.h.adjoint(&self.h.apply(v)?)?;
        if alpha == 0.0 {
            return Ok(g0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let g1 = syn.h_t.adjoint(&syn.h_t.apply(v)?)?;
        let a = T::of_f64(alpha);
        Ok(blend(T::one() - a, &g0, a, &g1))
    }

    /// Bind the measurement tensors onto a tape (once per graph).
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<FidelityNodes> {
        let y = tape.input(self.y.clone(), "measurement-y")?;
        let y_t = match &self.synthetic {
            Some(syn) => Some(tape.input(syn.y_t.clone(), "synthetic-y")?),
            None => None,
        };
        Ok(FidelityNodes { y, y_t })
    }

    /// Back-projection initializer as a graph node. At alpha = 0 only the
    /// measurement branch enters the graph.
    pub fn adjoint_init_node(
        &self,
        tape: &mut Tape<T>,
        nodes: &FidelityNodes,
        alpha: f64,
    ) -> Result<NodeId> {
        self.check_alpha(alpha)?;
        let b0 = tape.linop(nodes.y, Arc::clone(&self.h), true)?;
        if alpha == 0.0 {
            return Ok(b0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let y_t = nodes.y_t.ok_or_else(|| {
            Error::Contract("fidelity: graph was bound without a synthetic measurement".into())
        })?;
        let b1 = tape.linop(y_t, Arc::clone(&syn.h_t), true)?;
        let a = T::of_f64(alpha);
        tape.lincomb(T::one() - a, b0, a, b1)
    }

    /// Gradient as a graph node; differentiable with respect to x. At
    /// alpha = 0 the node is exactly the measurement gradient with no
    /// synthetic term in the graph.
    pub fn grad_node(&self, tape: &mut Tape<T>, nodes: &FidelityNodes, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.check_alpha(alpha)?;
        let hx = tape.linop(x, Arc::clone(&self.h), false)?;
        let r = tape.sub(hx, nodes.y)?;
        let g0 = tape.linop(r, Arc::clone(&self.h), true)?;
        if alpha == 0.0 {
            return Ok(g0);
        }
        let syn = self.synthetic.as_ref().expect("alpha > 0 checked");
        let y_t = nodes.y_t.ok_or_else(|| {
            Error::Contract("fidelity: graph was bound without a synthetic measurement".into())
        })?;
        let htx = tape.linop(x, Arc::clone(&syn.h_t), false)?;
        let rt = tape.sub(htx, y_t)?;
        let g1 = tape.linop(rt, Arc::clone(&syn.h_t), true)?;
        let a = T::of_f64(alpha);
        tape.lincomb(T::one() - a, g0, a, g1)
    }

    /// Synthetic-operator access count (0 when no synthetic pair exists).
    pub fn synthetic_accesses(&self) -> u64 {
        self.synthetic.as_ref().map(|s| s.h_t.access_count()).unwrap_or(0)
    }
}

fn check_measurement<T: Scalar>(op: &dyn LinearOperator<T>, y: &Tensor<T>, what: &str) -> Result<()> {
    match y.shape().last() {
        Some(&last) if last == op.out_len() => Ok(()),
        _ => Err(Error::Contract(format!(
            "fidelity: {what} tensor shape {:?} does not end in operator range {}",
            y.shape(),
            op.out_len()
        ))),
    }
}

fn lead_count<T: Scalar>(y: &Tensor<T>, m: usize) -> usize {
    y.numel() / m.max(1)
}

fn blend<T: Scalar>(ca: T, a: &Tensor<T>, cb: T, b: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| ca.mul_add(x, cb * y)).collect(),
    )
    .expect("blend shapes checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_cs_pair, CsDesign, Dense};
    use crate::rng::Rng;

    fn identity_op(n: usize) -> Arc<dyn LinearOperator<f64>> {
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = 1.0;
        }
        Arc::new(Dense::new(m).unwrap())
    }

    fn cs_fidelity(seed: u64) -> (HomotopyFidelity<f64>, Tensor<f64>) {
        let (h, ht) = make_cs_pair(&CsDesign { n: 64, m_over_n: 0.3, eta: 0.2, seed }).unwrap();
        let (h, ht): (Arc<dyn LinearOperator<f64>>, Arc<dyn LinearOperator<f64>>) =
            (Arc::new(h), Arc::new(ht));
        let mut rng = Rng::new(seed).stream("fidelity-test");
        let x_star = rng.normal_tensor::<f64>(&[64]);
        let y = h.apply(&x_star).unwrap();
        let y_t = ht.apply(&x_star).unwrap();
        (HomotopyFidelity::new(h, y, Some((ht, y_t))).unwrap(), x_star)
    }

    #[test]
    fn objective_is_stated_convex_combination() {
        // g0 = 2 and g1 = 4 by construction: residuals of norm 2 and sqrt(8).
        let id = identity_op(4);
        let y = Tensor::from_vec(&[4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let y_t = Tensor::from_vec(&[4], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let fid = HomotopyFidelity::new(Arc::clone(&id), y, Some((id, y_t))).unwrap();
        let x = Tensor::zeros(&[4]);
        assert!((fid.objective(&x, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((fid.objective(&x, 1.0).unwrap() - 4.0).abs() < 1e-15);
        assert!((fid.objective(&x, 0.5).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn consistent_point_has_zero_objective_and_gradient() {
        let (fid, x_star) = cs_fidelity(5);
        for &alpha in &[0.0, 0.3, 1.0] {
            assert!(fid.objective(&x_star, alpha).unwrap().abs() < 1e-20);
            assert!(fid.grad(&x_star, alpha).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (fid, _) = cs_fidelity(7);
        let mut rng = Rng::new(40).stream("fd");
        let x = rng.normal_tensor::<f64>(&[64]);
        for &alpha in &[0.0, 0.4, 1.0] {
            let g = fid.grad(&x, alpha).unwrap();
            let eps = 1e-6;
            for i in (0..64).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (fid.objective(&xp, alpha).unwrap() - fid.objective(&xm, alpha).unwrap()) / (2.0 * eps);
                let rel = (g.data()[i] - fd).abs() / (g.data()[i].abs() + 1e-12);
                assert!(rel < 1e-6, "alpha={alpha} i={i}: {} vs {fd}", g.data()[i]);
            }
        }
    }

    #[test]
    fn gradient_is_affine_in_alpha() {
        let (fid, _) = cs_fidelity(11);
        let mut rng = Rng::new(41).stream("affine");
        let x = rng.normal_tensor::<f64>(&[64]);
        let g0 = fid.grad(&x, 0.0).unwrap();
        let g1 = fid.grad(&x, 1.0).unwrap();
        for &alpha in &[0.1, 0.25, 0.5, 0.9] {
            let g = fid.grad(&x, alpha).unwrap();
            let expect = blend(1.0 - alpha, &g0, alpha, &g1);
            for (a, b) in g.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_init_endpoints_and_degenerate_blend() {
        let (fid, _) = cs_fidelity(13);
        let b0 = fid.adjoint_init(0.0).unwrap();
        let direct = fid.measurement_op().adjoint(fid.measurement()).unwrap();
        assert_eq!(b0.data(), direct.data());

        // H = H_t, y = y_t: any alpha returns the same back-projection.
        let id = identity_op(4);
        let y = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let fid2 = HomotopyFidelity::new(Arc::clone(&id), y.clone(), Some((id, y))).unwrap();
        let b = fid2.adjoint_init(0.5).unwrap();
        let b1 = fid2.adjoint_init(1.0).unwrap();
        for (u, v) in b.data().iter().zip(b1.data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_zero_never_touches_synthetic_operator() {
        let (fid, _) = cs_fidelity(17);
        let mut rng = Rng::new(42).stream("zero-alpha");
        let x = rng.normal_tensor::<f64>(&[64]);
        let before = fid.synthetic_accesses();
        let _ = fid.objective(&x, 0.0).unwrap();
        let _ = fid.grad(&x, 0.0).unwrap();
        let _ = fid.adjoint_init(0.0).unwrap();
        let mut tape = Tape::new();
        let nodes = fid.bind(&mut tape).unwrap();
        let xn = tape.input(x, "x").unwrap();
        let _ = fid.grad_node(&mut tape, &nodes, xn, 0.0).unwrap();
        assert_eq!(fid.synthetic_accesses(), before);
    }

    #[test]
    fn alpha_without_synthetic_pair_is_rejected() {
        let id = identity_op(4);
        let y = Tensor::zeros(&[4]);
        let fid = HomotopyFidelity::new(id, y, None).unwrap();
        let x = Tensor::zeros(&[4]);
        assert!(fid.objective(&x, 0.0).is_ok());
        assert!(fid.objective(&x, 0.5).is_err());
        assert!(fid.grad(&x, 1.0).is_err());
    }

    #[test]
    fn grad_node_matches_direct_gradient() {
        let (fid, _) = cs_fidelity(19);
        let mut rng = Rng::new(43).stream("node");
        let x = rng.normal_tensor::<f64>(&[64]);
        for &alpha in &[0.0, 0.6] {
            let direct = fid.grad(&x, alpha).unwrap();
            let mut tape = Tape::new();
            let nodes = fid.bind(&mut tape).unwrap();
            let xn = tape.input(x.clone(), "x").unwrap();
            let gn = fid.grad_node(&mut tape, &nodes, xn, alpha).unwrap();
            for (a, b) in tape.value(gn).data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cs_hessian_spectral_norm_is_one() {
        let (fid, _) = cs_fidelity(23);
        let mut rng = Rng::new(44).stream("hessian");
        for &alpha in &[0.0, 0.5, 1.0] {
            let r = crate::linalg::power_iteration(
                |v| fid.hessian_apply(v, alpha),
                |v| fid.hessian_apply(v, alpha),
                64,
                500,
                1e-12,
                &mut rng,
            )
            .unwrap();
            assert!(r.converged, "alpha={alpha}");
            assert!((r.sigma - 1.0).abs() < 1e-5, "alpha={alpha}: sigma={}", r.sigma);
        }
    }
}
