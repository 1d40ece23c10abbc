use std::sync::Arc;

use super::check::finite_diff_check;
use super::{NodeId, Tape};
use crate::operators::{make_cs_pair, CsDesign, LinearOperator};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Builds the graph twice: once with trainable leaves to get analytic
/// gradients, then repeatedly inside the finite-difference probe. The probe
/// reduces the output to a scalar by a fixed random projection so every
/// output coordinate influences the objective.
fn assert_grad<F>(params: &[Tensor<f64>], step: f64, tol: f64, build: F)
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(p.clone(), &format!("p{i}")).unwrap())
        .collect();
    let root = build(&mut tape, &ids);
    assert_eq!(tape.value(root).numel(), 1, "build must return a scalar node");
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let err = finite_diff_check(
        |ps| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> =
                ps.iter().enumerate().map(|(i, p)| t.input(p.clone(), &format!("p{i}")).unwrap()).collect();
            let root = build(&mut t, &ids);
            Ok(t.scalar(root))
        },
        params,
        &analytic,
        step,
    )
    .unwrap();
    assert!(err <= tol, "max relative gradient error {err} exceeds {tol}");
}

/// Scalarize an arbitrary node by projecting onto a fixed random tensor.
fn project(tape: &mut Tape<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = tape.shape(x).to_vec();
    let c = Rng::new(seed).stream("projection").normal_tensor::<f64>(&shape);
    let prod = tape.mask_mul(x, c).unwrap();
    tape.sum(prod).unwrap()
}

#[test]
fn sum_of_squares_gradient_is_two_w() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), "w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let root = tape.sum(sq).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn l1_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap(), "a").unwrap();
    let b = tape.input(Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap(), "b").unwrap();
    let d = tape.sub(a, b).unwrap();
    let ab = tape.abs(d).unwrap();
    let root = tape.sum(ab).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn elementwise_and_scalar_ops_match_finite_differences() {
    let mut rng = Rng::new(101).stream("elementwise");
    let a = rng.normal_tensor::<f64>(&[2, 6]);
    let b = rng.normal_tensor::<f64>(&[2, 6]);
    assert_grad(&[a, b], 1e-5, 1e-6, |t, p| {
        let s = t.add(p[0], p[1]).unwrap();
        let d = t.sub(s, p[1]).unwrap();
        let m = t.mul(d, p[1]).unwrap();
        let lc = t.lincomb(0.3, m, -1.7, p[0]).unwrap();
        let af = t.affine(lc, 2.5, 0.1).unwrap();
        let sq = t.square(af).unwrap();
        project(t, sq, 1)
    });
}

#[test]
fn mean_and_sum_match_finite_differences() {
    let mut rng = Rng::new(102).stream("reduce");
    let x = rng.normal_tensor::<f64>(&[3, 5]);
    assert_grad(&[x.clone()], 1e-5, 1e-6, |t, p| t.mean(p[0]).unwrap());
    assert_grad(&[x], 1e-5, 1e-6, |t, p| t.sum(p[0]).unwrap());
}

#[test]
fn abs_matches_finite_differences_away_from_kink() {
    let mut rng = Rng::new(103).stream("abs");
    // Keep every coordinate at least 0.1 from the kink.
    let x = rng.uniform_tensor::<f64>(&[4, 4], 0.1, 1.0).map(|v| if v > 0.55 { v } else { -v });
    assert_grad(&[x], 1e-5, 1e-6, |t, p| {
        let a = t.abs(p[0]).unwrap();
        project(t, a, 2)
    });
}

#[test]
fn relu_and_gelu_match_finite_differences() {
    let mut rng = Rng::new(104).stream("act");
    let x = rng.uniform_tensor::<f64>(&[2, 10], 0.05, 2.0).map(|v| if v > 1.0 { v - 2.1 } else { v });
    assert_grad(&[x.clone()], 1e-5, 1e-6, |t, p| {
        let r = t.relu(p[0]).unwrap();
        project(t, r, 3)
    });
    assert_grad(&[x], 1e-5, 1e-6, |t, p| {
        let g = t.gelu(p[0]).unwrap();
        project(t, g, 4)
    });
}

#[test]
fn scalar_mul_matches_finite_differences() {
    let mut rng = Rng::new(120).stream("smul");
    let s = Tensor::scalar(rng.normal());
    let x = rng.normal_tensor::<f64>(&[3, 4]);
    assert_grad(&[s, x], 1e-5, 1e-6, |t, p| {
        let y = t.scalar_mul(p[0], p[1]).unwrap();
        project(t, y, 15)
    });
    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(2.0), "a").unwrap();
    let v = tape.input(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap(), "v").unwrap();
    let y = tape.scalar_mul(a, v).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0, -2.0]);
    let root = tape.sum(y).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[2.0]);
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = Rng::new(105).stream("mm");
    let a = rng.normal_tensor::<f64>(&[3, 4]);
    let b = rng.normal_tensor::<f64>(&[4, 2]);
    assert_grad(&[a, b], 1e-5, 1e-6, |t, p| {
        let c = t.matmul(p[0], p[1]).unwrap();
        project(t, c, 5)
    });
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = Rng::new(106).stream("conv");
    let x = rng.normal_tensor::<f64>(&[2, 2, 6, 6]);
    let w = rng.normal_tensor::<f64>(&[3, 2, 3, 3]);
    let bias = rng.normal_tensor::<f64>(&[3]);
    assert_grad(&[x, w, bias], 1e-5, 1e-6, |t, p| {
        let c = t.conv2d(p[0], p[1], Some(p[2])).unwrap();
        project(t, c, 6)
    });
}

#[test]
fn conv_transpose2d_matches_finite_differences() {
    let mut rng = Rng::new(107).stream("convt");
    let x = rng.normal_tensor::<f64>(&[2, 3, 5, 5]);
    let w = rng.normal_tensor::<f64>(&[3, 2, 3, 3]);
    assert_grad(&[x, w], 1e-5, 1e-6, |t, p| {
        let c = t.conv_transpose2d(p[0], p[1]).unwrap();
        project(t, c, 7)
    });
}

#[test]
fn conv_transpose_is_adjoint_of_conv_in_space() {
    // For single-channel kernels, <conv(x), y> = <x, conv_t(y)> with the
    // same weight viewed with swapped channel roles.
    let mut rng = Rng::new(108).stream("adj");
    let x = rng.normal_tensor::<f64>(&[1, 1, 8, 8]);
    let y = rng.normal_tensor::<f64>(&[1, 1, 8, 8]);
    let w = rng.normal_tensor::<f64>(&[1, 1, 5, 3]);
    let mut tape = Tape::new();
    let xn = tape.input(x.clone(), "x").unwrap();
    let yn = tape.input(y.clone(), "y").unwrap();
    let wn = tape.input(w, "w").unwrap();
    let cx = tape.conv2d(xn, wn, None).unwrap();
    let cty = tape.conv_transpose2d(yn, wn).unwrap();
    let lhs = tape.value(cx).dot(&y).unwrap();
    let rhs = x.dot(tape.value(cty)).unwrap();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn pooling_and_upsampling_match_finite_differences() {
    let mut rng = Rng::new(109).stream("pool");
    let x = rng.normal_tensor::<f64>(&[2, 2, 4, 4]);
    assert_grad(&[x.clone()], 1e-5, 1e-6, |t, p| {
        let c = t.avgpool2(p[0]).unwrap();
        project(t, c, 8)
    });
    assert_grad(&[x], 1e-5, 1e-6, |t, p| {
        let c = t.upsample2(p[0]).unwrap();
        project(t, c, 9)
    });
}

#[test]
fn batchnorm_train_matches_finite_differences() {
    let mut rng = Rng::new(110).stream("bn");
    let x = rng.normal_tensor::<f64>(&[3, 2, 4, 4]);
    let gamma = rng.uniform_tensor::<f64>(&[2], 0.5, 1.5);
    let beta = rng.normal_tensor::<f64>(&[2]);
    assert_grad(&[x, gamma, beta], 1e-5, 1e-6, |t, p| {
        let b = t.batchnorm_train(p[0], p[1], p[2], 1e-5, "bn0").unwrap();
        project(t, b, 10)
    });
}

#[test]
fn batchnorm_eval_matches_finite_differences() {
    let mut rng = Rng::new(111).stream("bne");
    let x = rng.normal_tensor::<f64>(&[2, 3, 4, 4]);
    let gamma = rng.uniform_tensor::<f64>(&[3], 0.5, 1.5);
    let beta = rng.normal_tensor::<f64>(&[3]);
    let rmean = rng.normal_tensor::<f64>(&[3]);
    let rvar = rng.uniform_tensor::<f64>(&[3], 0.5, 1.5);
    assert_grad(&[x, gamma, beta], 1e-5, 1e-6, move |t, p| {
        let b = t.batchnorm_eval(p[0], p[1], p[2], rmean.clone(), rvar.clone(), 1e-5).unwrap();
        project(t, b, 11)
    });
}

#[test]
fn batchnorm_train_records_batch_stats() {
    let mut rng = Rng::new(112).stream("bns");
    let x = rng.normal_tensor::<f64>(&[4, 2, 3, 3]);
    let mut tape = Tape::new();
    let xn = tape.input(x.clone(), "x").unwrap();
    let g = tape.input(Tensor::full(&[2], 1.0), "g").unwrap();
    let b = tape.input(Tensor::zeros(&[2]), "b").unwrap();
    let _ = tape.batchnorm_train(xn, g, b, 1e-5, "layer.bn").unwrap();
    let stats = tape.bn_batch_stats();
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].path, "layer.bn");
    // Channel 0 mean over batch and space.
    let mut s = 0.0;
    for bi in 0..4 {
        for i in 0..9 {
            s += x.data()[bi * 2 * 9 + i];
        }
    }
    assert!((stats[0].mean.data()[0] - s / 36.0).abs() < 1e-12);
}

#[test]
fn l2_per_row_matches_finite_differences() {
    let mut rng = Rng::new(113).stream("l2");
    // Norms bounded away from zero.
    let x = rng.uniform_tensor::<f64>(&[3, 7], 0.3, 1.0);
    assert_grad(&[x], 1e-5, 1e-6, |t, p| {
        let n = t.l2_per_row(p[0]).unwrap();
        project(t, n, 12)
    });
}

#[test]
fn fft_magnitude_matches_finite_differences() {
    // Pick a seed whose spectrum stays away from the |X| = 0 kink.
    let mut chosen = None;
    for s in 0..200u64 {
        let x = Rng::new(s).stream("fft-fd").normal_tensor::<f64>(&[1, 1, 8, 8]);
        let mut tape = Tape::new();
        let xn = tape.input(x.clone(), "x").unwrap();
        let m = tape.fft2_magnitude(xn).unwrap();
        let min_mag = tape.value(m).data().iter().cloned().fold(f64::INFINITY, f64::min);
        if min_mag > 0.05 {
            chosen = Some(x);
            break;
        }
    }
    let x = chosen.expect("no spectrum bounded away from zero in 200 seeds");
    assert_grad(&[x], 1e-6, 1e-6, |t, p| {
        let m = t.fft2_magnitude(p[0]).unwrap();
        project(t, m, 13)
    });
}

#[test]
fn fft_magnitude_value_matches_plain_dft() {
    // Orthonormal scaling: Parseval + DC coefficient of a constant image.
    let mut tape = Tape::<f64>::new();
    let x = Tensor::full(&[1, 1, 4, 4], 2.0);
    let xn = tape.input(x, "x").unwrap();
    let m = tape.fft2_magnitude(xn).unwrap();
    let v = tape.value(m);
    // DC magnitude = sum / sqrt(HW) = 32 / 4 = 8; all others 0.
    assert!((v.data()[0] - 8.0).abs() < 1e-12);
    for &o in &v.data()[1..] {
        assert!(o.abs() < 1e-12);
    }

    let mut rng = Rng::new(114).stream("parseval");
    let y = rng.normal_tensor::<f64>(&[1, 1, 8, 8]);
    let mut t2 = Tape::new();
    let yn = t2.input(y.clone(), "y").unwrap();
    let m2 = t2.fft2_magnitude(yn).unwrap();
    assert!((t2.value(m2).norm2() - y.norm2()).abs() < 1e-10);
}

#[test]
fn ssim_matches_finite_differences() {
    let mut rng = Rng::new(115).stream("ssim");
    let a = rng.uniform_tensor::<f64>(&[1, 1, 8, 8], 0.1, 0.9);
    let b = rng.uniform_tensor::<f64>(&[1, 1, 8, 8], 0.1, 0.9);
    assert_grad(&[a, b], 1e-5, 1e-5, |t, p| {
        t.ssim(p[0], p[1], 5, 1.5, 1e-4, 9e-4).unwrap()
    });
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = Rng::new(116).stream("ssim1");
    let a = rng.uniform_tensor::<f64>(&[2, 1, 12, 12], 0.0, 1.0);
    let mut tape = Tape::new();
    let an = tape.input(a.clone(), "a").unwrap();
    let bn = tape.input(a, "b").unwrap();
    let s = tape.ssim(an, bn, 11, 1.5, 1e-4, 9e-4).unwrap();
    assert!((tape.scalar(s) - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_rejects_small_images() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(Tensor::zeros(&[1, 1, 8, 8]), "a").unwrap();
    let b = tape.input(Tensor::zeros(&[1, 1, 8, 8]), "b").unwrap();
    assert!(tape.ssim(a, b, 11, 1.5, 1e-4, 9e-4).is_err());
}

#[test]
fn linop_gradient_flows_through_adjoint() {
    let (h, _) = make_cs_pair(&CsDesign { n: 16, m_over_n: 0.5, eta: 0.0, seed: 2 }).unwrap();
    let h: Arc<dyn LinearOperator<f64>> = Arc::new(h);
    let mut rng = Rng::new(117).stream("linop");
    let x = rng.normal_tensor::<f64>(&[2, 16]);
    let h2 = Arc::clone(&h);
    assert_grad(&[x], 1e-5, 1e-6, move |t, p| {
        let y = t.linop(p[0], Arc::clone(&h2), false).unwrap();
        let s = t.square(y).unwrap();
        t.sum(s).unwrap()
    });
}

#[test]
fn reshape_round_trips_gradients() {
    let mut rng = Rng::new(118).stream("reshape");
    let x = rng.normal_tensor::<f64>(&[2, 8]);
    assert_grad(&[x], 1e-5, 1e-6, |t, p| {
        let r = t.reshape(p[0], vec![4, 4]).unwrap();
        let s = t.square(r).unwrap();
        t.mean(s).unwrap()
    });
}

#[test]
fn shared_weight_gradients_accumulate_additively() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap(), "w").unwrap();
    let a = tape.input(Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap(), "a").unwrap();
    let b = tape.input(Tensor::from_vec(&[2], vec![-1.0, 4.0]).unwrap(), "b").unwrap();
    let wa = tape.mul(w, a).unwrap();
    let wb = tape.mul(w, b).unwrap();
    let s = tape.add(wa, wb).unwrap();
    let root = tape.sum(s).unwrap();
    let grads = tape.backward(root).unwrap();
    // d/dw sum(w*a + w*b) = a + b, via two accumulated contributions.
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 7.0]);
}

#[test]
fn shared_conv_weight_matches_finite_differences() {
    let mut rng = Rng::new(119).stream("share");
    let x = rng.normal_tensor::<f64>(&[1, 1, 6, 6]);
    let w = rng.normal_tensor::<f64>(&[1, 1, 3, 3]).scale(0.4);
    assert_grad(&[x, w], 1e-5, 1e-6, |t, p| {
        let c1 = t.conv2d(p[0], p[1], None).unwrap();
        let c2 = t.conv2d(c1, p[1], None).unwrap();
        project(t, c2, 14)
    });
}

#[test]
fn binder_deduplicates_by_path() {
    let mut tape = Tape::new();
    let mut binder = super::Binder::new(true);
    let v = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    let a = binder.bind(&mut tape, "stage.w", &v).unwrap();
    let b = binder.bind(&mut tape, "stage.w", &v).unwrap();
    let c = binder.bind(&mut tape, "stage.b", &v).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(binder.bound().count(), 2);
}

#[test]
fn non_finite_forward_names_the_node() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(&[1], vec![1e200]).unwrap(), "big").unwrap();
    let err = tape.square(x).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("square"), "message was: {msg}");
}

#[test]
fn non_scalar_backward_root_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[3]), "x").unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_ignores_untracked_branches() {
    // Gradient flows only into trainable leaves.
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), "w").unwrap();
    let x = tape.input(Tensor::from_vec(&[2], vec![5.0, -3.0]).unwrap(), "x").unwrap();
    let p = tape.mul(w, x).unwrap();
    let root = tape.sum(p).unwrap();
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[5.0, -3.0]);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

    /// Per-op gradient property over random seeds: a small composite graph
    /// exercising conv, activation, pooling, and reductions passes the
    /// central-difference check.
    #[test]
    fn composite_graph_gradients_hold_over_seeds(seed in 0u64..2000) {
        let mut rng = Rng::new(seed).stream("prop");
        let x = rng.normal_tensor::<f64>(&[1, 1, 4, 4]);
        let w = rng.normal_tensor::<f64>(&[2, 1, 3, 3]).scale(0.5);
        assert_grad(&[x, w], 1e-5, 1e-5, |t, p| {
            let c = t.conv2d(p[0], p[1], None).unwrap();
            let g = t.gelu(c).unwrap();
            let pool = t.avgpool2(g).unwrap();
            let sq = t.square(pool).unwrap();
            t.mean(sq).unwrap()
        });
    }
}
