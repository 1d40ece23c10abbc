use std::sync::Arc;
use std::time::Instant;

use utopy::autodiff::{kernels, Binder, Tape};
use utopy::data::synth_dataset;
use utopy::operators::{make_cs_pair, CsDesign, HomotopyFidelity, LinearOperator};
use utopy::rng::Rng;
use utopy::train::{composite_loss_node, LossWeights};
use utopy::unroll::UnrollModel;

fn time<F: FnMut()>(label: &str, iters: usize, mut f: F) -> f64 {
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    let per = start.elapsed().as_secs_f64() / iters as f64;
    println!("{label:32} {:9.3} ms/iter", per * 1e3);
    per
}

fn main() {
    let side = 32usize;
    let n = side * side;
    let batch = 32usize;
    let mut rng = Rng::new(0);
    let (h, ht) = make_cs_pair(&CsDesign { n, m_over_n: 0.3, eta: 0.1, seed: 0 }).unwrap();
    let h: Arc<dyn LinearOperator<f64>> = Arc::new(h);
    let ht: Arc<dyn LinearOperator<f64>> = Arc::new(ht);
    let model = UnrollModel::new_unet(3, side, &[8, 16], false, &mut rng.stream("m")).unwrap();

    let set = synth_dataset(batch, side, 1).unwrap();
    let flat = set.images().reshaped(&[batch, n]).unwrap();
    let y = h.apply(&flat).unwrap();
    let ys = ht.apply(&flat).unwrap();
    let gt = set.images().reshaped(&[batch, 1, side, side]).unwrap();
    let fid = HomotopyFidelity::new(Arc::clone(&h), y, Some((Arc::clone(&ht), ys))).unwrap();
    let w = LossWeights::default();

    // Full train step, phase by phase.
    time("forward(train)", 10, || {
        let mut tape = Tape::new();
        let mut binder = Binder::new(true);
        let _ = model.forward_tape(&mut tape, &mut binder, &fid, 0.5, true, false).unwrap();
    });
    let mut tape = Tape::new();
    let mut binder = Binder::new(true);
    let trace = model.forward_tape(&mut tape, &mut binder, &fid, 0.5, true, false).unwrap();
    let out_img = tape.reshape(trace.output, vec![batch, 1, side, side]).unwrap();
    let gt_node = tape.input(gt.clone(), "target").unwrap();
    let nodes_before_loss = tape.len();
    let loss = composite_loss_node(&mut tape, out_img, gt_node, &w).unwrap();
    println!("tape nodes: fwd={nodes_before_loss} +loss={}", tape.len() - nodes_before_loss);
    time("loss node (fwd)", 10, || {
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new(true);
        let trace2 = model.forward_tape(&mut tape2, &mut binder2, &fid, 0.5, true, false).unwrap();
        let out2 = tape2.reshape(trace2.output, vec![batch, 1, side, side]).unwrap();
        let gt2 = tape2.input(gt.clone(), "target").unwrap();
        let _ = composite_loss_node(&mut tape2, out2, gt2, &w).unwrap();
    });
    time("backward", 5, || {
        let _ = tape.backward(loss).unwrap();
    });

    if utopy::autodiff::prof::enabled() {
        utopy::autodiff::prof::reset();
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new(true);
        let trace2 = model.forward_tape(&mut tape2, &mut binder2, &fid, 0.5, true, false).unwrap();
        let out2 = tape2.reshape(trace2.output, vec![batch, 1, side, side]).unwrap();
        let gt2 = tape2.input(gt.clone(), "target").unwrap();
        let loss2 = composite_loss_node(&mut tape2, out2, gt2, &w).unwrap();
        let _ = tape2.backward(loss2).unwrap();
        println!("per-op attribution (1 fwd + 1 bwd):");
        utopy::autodiff::prof::dump();
        return;
    }

    // Raw kernel throughput at the hot UNet shapes.
    let shapes = [
        ("conv 16->8 @32^2", batch, 16, 8, 32),
        ("conv 8->8 @32^2", batch, 8, 8, 32),
        ("conv 16->16 @16^2", batch, 16, 16, 16),
    ];
    for (label, b, ci, co, hw) in shapes {
        let x = vec![1.0f64; b * ci * hw * hw];
        let w_ = vec![0.5f64; co * ci * 9];
        let bias = vec![0.0f64; co];
        let mut out = vec![0.0f64; b * co * hw * hw];
        let dims = kernels::ConvDims { b, ci, co, h: hw, w: hw, kh: 3, kw: 3 };
        let flops = 2.0 * (b * ci * co * hw * hw * 9) as f64;
        let per = time(label, 50, || {
            kernels::conv2d_fwd(&x, &w_, Some(&bias), &mut out, &dims);
        });
        println!("{label:32} {:9.2} GFLOP/s", flops / per / 1e9);
    }

    // Gradient-path kernels.
    let (b, ci, co, hw) = (batch, 16, 8, 32);
    let dims = kernels::ConvDims { b, ci, co, h: hw, w: hw, kh: 3, kw: 3 };
    let x = vec![1.0f64; b * ci * hw * hw];
    let w_ = vec![0.5f64; co * ci * 9];
    let go = vec![0.25f64; b * co * hw * hw];
    let mut gx = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; w_.len()];
    time("conv bwd_input 16->8", 50, || kernels::conv2d_bwd_input(&go, &w_, &mut gx, &dims));
    time("conv bwd_weight 16->8", 50, || kernels::conv2d_bwd_weight(&x, &go, &mut gw, &dims));
}
