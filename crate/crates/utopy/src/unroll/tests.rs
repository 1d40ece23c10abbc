use super::fista::{fista_classical, soft_threshold};
use super::*;
use crate::autodiff::check::finite_diff_check;
use crate::operators::{make_cs_pair, CsDesign, Dense};
use crate::wavelet;

fn identity_unet_model(k: usize, side: usize, seed: u64) -> UnrollModel {
    let mut rng = Rng::new(seed).stream("model");
    UnrollModel::new_unet(k, side, &[4, 8], false, &mut rng).unwrap()
}

/// Well-conditioned square dense operator: I + small random perturbation.
fn well_posed_dense(n: usize, seed: u64) -> Dense<f64> {
    let mut rng = Rng::new(seed).stream("dense");
    let mut m = rng.normal_tensor::<f64>(&[n, n]).scale(0.05 / (n as f64).sqrt());
    for i in 0..n {
        m.data_mut()[i * n + i] += 1.0;
    }
    Dense::new(m).unwrap()
}

fn cs_fidelity(side: usize, seed: u64) -> (HomotopyFidelity<f64>, Tensor<f64>) {
    let n = side * side;
    let (h, ht) = make_cs_pair(&CsDesign { n, m_over_n: 0.4, eta: 0.2, seed }).unwrap();
    let mut rng = Rng::new(seed).stream("signal");
    let x = rng.uniform_tensor::<f64>(&[n], 0.0, 1.0);
    let y = h.apply(&x).unwrap();
    let y_t = ht.apply(&x).unwrap();
    let fid =
        HomotopyFidelity::new(Arc::new(h), y, Some((Arc::new(ht) as _, y_t))).unwrap();
    (fid, x)
}

#[test]
fn no_op_stage_passes_z_through() {
    let model = identity_unet_model(1, 8, 1);
    let (fid, _) = cs_fidelity(8, 2);
    let mut rng = Rng::new(3).stream("z");
    let z = rng.normal_tensor::<f64>(&[64]);
    let x_prev = rng.normal_tensor::<f64>(&[64]);
    // Fresh model: τ = 1e-3 by default, so zero it for the no-op check.
    let mut m = model;
    m.set_tau(0, 0.0);
    let (x_next, z_next) = m.unroll_step(0, &fid, 0.0, &x_prev, &z).unwrap();
    assert_eq!(x_next, z);
    assert_eq!(z_next, z);
}

#[test]
fn identity_prox_stage_is_a_plain_gradient_step() {
    let mut model = identity_unet_model(1, 8, 4);
    model.set_tau(0, 0.3);
    let (fid, _) = cs_fidelity(8, 5);
    let mut rng = Rng::new(6).stream("z");
    let z = rng.normal_tensor::<f64>(&[64]);
    let (x_next, _) = model.unroll_step(0, &fid, 0.0, &z, &z).unwrap();
    let mut expect = z.clone();
    expect.axpy(-0.3, &fid.grad(&z, 0.0).unwrap()).unwrap();
    assert!(x_next.sub(&expect).unwrap().max_abs() < 1e-14);
}

#[test]
fn repeated_identity_steps_reach_the_least_squares_solution() {
    let n = 16;
    let h = well_posed_dense(n, 7);
    let matrix = h.matrix().clone();
    let mut rng = Rng::new(8).stream("y");
    let y = rng.normal_tensor::<f64>(&[n]);
    let fid = HomotopyFidelity::new(Arc::new(well_posed_dense(n, 7)), y.clone(), None).unwrap();

    let mut model = identity_unet_model(1, 4, 9);
    model.set_tau(0, 0.8); // H ≈ I so L ≈ 1; τ safely below 2/L
    model.set_t_accel(0, 0.0);
    let mut x = fid.adjoint_init(0.0).unwrap();
    for _ in 0..50 {
        let (next, _) = model.unroll_step(0, &fid, 0.0, &x, &x).unwrap();
        x = next;
    }

    // Normal-equations oracle via an independent dense solver.
    let a = nalgebra::DMatrix::from_row_slice(n, n, matrix.data());
    let b = nalgebra::DVector::from_row_slice(y.data());
    let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
    for (i, &xi) in x.data().iter().enumerate() {
        assert!((xi - sol[i]).abs() < 1e-6, "coefficient {i}: {xi} vs {}", sol[i]);
    }
}

#[test]
fn identity_prox_composition_equals_textbook_gradient_descent() {
    let side = 8;
    let n = side * side;
    let (fid, _) = cs_fidelity(side, 10);
    let mut model = identity_unet_model(3, side, 11);
    for k in 0..3 {
        model.set_tau(k, 0.5);
        model.set_t_accel(k, 0.0);
    }
    let got = model.reconstruct(&fid, 0.0).unwrap();

    let mut x = fid.adjoint_init(0.0).unwrap();
    for _ in 0..3 {
        let g = fid.grad(&x, 0.0).unwrap();
        x.axpy(-0.5, &g).unwrap();
    }
    assert_eq!(x.shape(), &[n]);
    assert!(got.sub(&x).unwrap().max_abs() < 1e-10);
}

#[test]
fn single_stage_with_zero_tau_returns_the_back_projection() {
    let (fid, _) = cs_fidelity(8, 12);
    let mut model = identity_unet_model(1, 8, 13);
    model.set_tau(0, 0.0);
    let out = model.reconstruct(&fid, 0.7).unwrap();
    assert_eq!(out, fid.adjoint_init(0.7).unwrap());
}

#[test]
fn alpha_zero_output_ignores_synthetic_contents() {
    let side = 8;
    let n = side * side;
    let (h, ht) = make_cs_pair(&CsDesign { n, m_over_n: 0.4, eta: 0.2, seed: 14 }).unwrap();
    let mut rng = Rng::new(15).stream("signal");
    let x = rng.uniform_tensor::<f64>(&[n], 0.0, 1.0);
    let y = h.apply(&x).unwrap();
    let y_t = ht.apply(&x).unwrap();

    let mut model = identity_unet_model(2, side, 16);
    model.set_tau(0, 0.4);
    model.set_tau(1, 0.2);
    model.set_t_accel(0, 0.3);

    let fid = HomotopyFidelity::new(
        Arc::new(h),
        y.clone(),
        Some((Arc::new(ht) as _, y_t.clone())),
    )
    .unwrap();
    let base = model.reconstruct(&fid, 0.0).unwrap();

    // Replace the synthetic measurement with garbage; α = 0 must not see it.
    let (h2, ht2) = make_cs_pair(&CsDesign { n, m_over_n: 0.4, eta: 0.2, seed: 14 }).unwrap();
    let garbage = rng.normal_tensor::<f64>(y_t.shape()).scale(1e6);
    let fid2 =
        HomotopyFidelity::new(Arc::new(h2), y, Some((Arc::new(ht2) as _, garbage))).unwrap();
    let perturbed = model.reconstruct(&fid2, 0.0).unwrap();
    assert_eq!(base.data(), perturbed.data(), "bitwise equality required at α = 0");
}

#[test]
fn infer_equals_forward_at_alpha_zero() {
    let side = 8;
    let n = side * side;
    let (h, _) = make_cs_pair(&CsDesign { n, m_over_n: 0.4, eta: 0.0, seed: 17 }).unwrap();
    let h = Arc::new(h) as Arc<dyn LinearOperator<f64>>;
    let mut model = identity_unet_model(2, side, 18);
    model.set_tau(0, 0.4);
    let mut rng = Rng::new(19).stream("probe");
    for _ in 0..100 {
        let y = rng.normal_tensor::<f64>(&[h.out_len()]);
        let via_infer = model.infer(Arc::clone(&h), &y).unwrap();
        let fid = HomotopyFidelity::new(Arc::clone(&h), y, None).unwrap();
        let via_forward = model.reconstruct(&fid, 0.0).unwrap();
        assert_eq!(via_infer.data(), via_forward.data());
    }
}

#[test]
fn zero_measurement_with_identity_prox_reconstructs_zero() {
    let side = 8;
    let (h, _) = make_cs_pair(&CsDesign { n: 64, m_over_n: 0.4, eta: 0.0, seed: 20 }).unwrap();
    let model = identity_unet_model(3, side, 21);
    let h = Arc::new(h) as Arc<dyn LinearOperator<f64>>;
    let y = Tensor::full(&[h.out_len()], 0.0);
    let out = model.infer(h, &y).unwrap();
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn inference_is_deterministic() {
    let side = 8;
    let (h, _) = make_cs_pair(&CsDesign { n: 64, m_over_n: 0.4, eta: 0.0, seed: 22 }).unwrap();
    let h = Arc::new(h) as Arc<dyn LinearOperator<f64>>;
    let model = identity_unet_model(2, side, 23);
    let y = Rng::new(24).stream("y").normal_tensor::<f64>(&[h.out_len()]);
    let a = model.infer(Arc::clone(&h), &y).unwrap();
    let b = model.infer(h, &y).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn non_finite_stage_failure_names_the_stage() {
    let (fid, _) = cs_fidelity(8, 25);
    let mut model = identity_unet_model(2, 8, 26);
    model.set_tau(1, f64::INFINITY); // poison stage 1's scaling
    let err = model.reconstruct(&fid, 0.0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("stage 1"), "got: {msg}");
}

#[test]
fn end_to_end_gradients_pass_finite_difference_check() {
    let side = 8;
    let (fid, _) = cs_fidelity(side, 27);
    for flavor in ["smooth", "unet"] {
        let mut rng = Rng::new(28).stream("model");
        let model = match flavor {
            "smooth" => UnrollModel::new_smooth(2, side, 2, 0.9, false, &mut rng).unwrap(),
            _ => UnrollModel::new_unet(2, side, &[2, 4], false, &mut rng).unwrap(),
        };
        let probe = Rng::new(29).stream("probe").normal_tensor::<f64>(&[side * side]);

        let mut params = Vec::new();
        model.visit(&mut |_p, t, trainable| {
            if trainable {
                params.push(t.clone());
            }
        });

        let eval = |ps: &[Tensor<f64>]| -> (Tape<f64>, NodeId, Vec<NodeId>) {
            let mut m = model.clone();
            let mut it = ps.iter();
            m.visit_mut(&mut |_p, t, trainable| {
                if trainable {
                    *t = it.next().expect("parameter count").clone();
                }
            });
            let mut tape = Tape::new();
            let mut binder = Binder::new(true);
            let trace = m.forward_tape(&mut tape, &mut binder, &fid, 0.6, true, false).unwrap();
            let proj = tape.mask_mul(trace.output, probe.clone()).unwrap();
            let root = tape.sum(proj).unwrap();
            // Parameters in visit order = binder paths in visit order.
            let mut ids = Vec::new();
            m.visit(&mut |p, _t, trainable| {
                if trainable {
                    ids.push(binder.get(p).expect("all trainable params bound"));
                }
            });
            (tape, root, ids)
        };

        let (tape, root, ids) = eval(&params);
        let grads = tape.backward(root).unwrap();
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(&params)
            .map(|(&id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let err = finite_diff_check(
            |ps| {
                let (tape, root, _) = eval(ps);
                Ok(tape.scalar(root))
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{flavor}: end-to-end gradient relative error {err}");
    }
}

#[test]
fn shared_weights_reuse_one_parameter_set() {
    let side = 8;
    let mut rng = Rng::new(30).stream("model");
    let model = UnrollModel::new_smooth(3, side, 2, 0.9, true, &mut rng).unwrap();
    let (fid, _) = cs_fidelity(side, 31);
    let mut tape = Tape::new();
    let mut binder = Binder::new(true);
    model.forward_tape(&mut tape, &mut binder, &fid, 0.5, false, false).unwrap();
    let shared_paths: Vec<&str> =
        binder.bound().map(|(p, _)| p).filter(|p| p.starts_with("shared.prox")).collect();
    // 4 conv layers × (weight + bias) bound once despite 3 stages.
    assert_eq!(shared_paths.len(), 8);
}

#[test]
fn intermediates_are_exposed_on_request() {
    let (fid, _) = cs_fidelity(8, 32);
    let model = identity_unet_model(3, 8, 33);
    let mut tape = Tape::new();
    let mut binder = Binder::new(false);
    let trace = model.forward_tape(&mut tape, &mut binder, &fid, 0.0, false, true).unwrap();
    assert_eq!(trace.stages.len(), 3);
    assert_eq!(*trace.stages.last().unwrap(), trace.output);
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(34).stream("model");
    let mut model = UnrollModel::new_unet(2, 16, &[4, 8], false, &mut rng).unwrap();
    model.set_tau(0, 0.123456789123456789);
    model.set_t_accel(1, -0.987654321);
    model.save_checkpoint(dir.path()).unwrap();
    let loaded = UnrollModel::load_checkpoint(dir.path()).unwrap();

    let mut original = Vec::new();
    model.visit(&mut |p, t, _| original.push((p.to_string(), t.clone())));
    let mut restored = Vec::new();
    loaded.visit(&mut |p, t, _| restored.push((p.to_string(), t.clone())));
    assert_eq!(original.len(), restored.len());
    for ((pa, ta), (pb, tb)) in original.iter().zip(&restored) {
        assert_eq!(pa, pb);
        assert_eq!(ta.shape(), tb.shape());
        let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {pa} must round-trip bitwise");
    }
}

#[test]
fn smooth_checkpoint_preserves_certificate_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(35).stream("model");
    let mut model = UnrollModel::new_smooth(2, 8, 3, 0.9, false, &mut rng).unwrap();
    if let AnyProx::Smooth(s) = &mut model.proxes[0] {
        let mut pi = Rng::new(36).stream("pi");
        s.spectral_normalize(0.5, 200, 8, &mut pi).unwrap();
    }
    model.save_checkpoint(dir.path()).unwrap();
    let loaded = UnrollModel::load_checkpoint(dir.path()).unwrap();
    if let AnyProx::Smooth(s) = &loaded.proxes[0] {
        assert_eq!(s.beta_certified(), Some(0.5));
    } else {
        panic!("flavor lost in round-trip");
    }
    let (fid, _) = cs_fidelity(8, 37);
    assert_eq!(
        model.reconstruct(&fid, 0.3).unwrap().data(),
        loaded.reconstruct(&fid, 0.3).unwrap().data()
    );
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(38).stream("model");
    let model = UnrollModel::new_unet(1, 8, &[2, 4], false, &mut rng).unwrap();
    model.save_checkpoint(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("stage0.prox.head.weight.utns")).unwrap();
    assert!(UnrollModel::load_checkpoint(dir.path()).is_err());
}

#[test]
fn soft_threshold_shrinkage() {
    assert_eq!(soft_threshold(3.0, 1.0), 2.0);
    assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
    assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    assert_eq!(soft_threshold(0.0, 1.0), 0.0);
}

#[test]
fn fista_without_regularization_solves_least_squares() {
    let n = 16;
    let h = well_posed_dense(n, 39);
    let matrix = h.matrix().clone();
    let y = Rng::new(40).stream("y").normal_tensor::<f64>(&[n]);
    let report = fista_classical(&h, &y, 0.0, 400).unwrap();

    let a = nalgebra::DMatrix::from_row_slice(n, n, matrix.data());
    let b = nalgebra::DVector::from_row_slice(y.data());
    let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
    for (i, &xi) in report.x.data().iter().enumerate() {
        assert!((xi - sol[i]).abs() < 1e-5, "coefficient {i}: {xi} vs {}", sol[i]);
    }
}

#[test]
fn fista_objective_is_monotone_non_increasing() {
    let n = 16;
    let h = well_posed_dense(n, 41);
    let y = Rng::new(42).stream("y").normal_tensor::<f64>(&[n]);
    let report = fista_classical(&h, &y, 0.0, 300).unwrap();
    for w in report.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn fista_recovers_a_haar_sparse_signal() {
    // x* has 6 nonzero Haar coefficients at n = 256; half-rate sensing.
    let side = 16;
    let n = side * side;
    let (h, _) = make_cs_pair(&CsDesign { n, m_over_n: 0.5, eta: 0.0, seed: 43 }).unwrap();
    let mut coeffs = Tensor::<f64>::zeros(&[side, side]);
    let mut rng = Rng::new(44).stream("support");
    for _ in 0..6 {
        let idx = rng.below(n);
        coeffs.data_mut()[idx] = rng.uniform_in(0.5, 1.5);
    }
    let x_star = wavelet::haar2_inverse(&coeffs, wavelet::max_levels(side))
        .unwrap()
        .reshaped(&[n])
        .unwrap();
    let y = h.apply(&x_star).unwrap();
    let report = fista_classical(&h, &y, 2e-4, 3000).unwrap();
    let rel = report.x.sub(&x_star).unwrap().norm2() / x_star.norm2();
    assert!(rel <= 1e-2, "relative recovery error {rel}");
}

#[test]
fn fista_rejects_bad_arguments() {
    let h = well_posed_dense(16, 45);
    let y = Tensor::<f64>::zeros(&[16]);
    assert!(fista_classical(&h, &y, -1.0, 10).is_err());
    assert!(fista_classical(&h, &y, 0.0, 0).is_err());
}
