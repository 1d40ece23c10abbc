//! Reverse-mode automatic differentiation on an eagerly evaluated tape.
//!
//! Training and inference share the same graph builders, so an evaluation
//! forward pass is byte-for-byte the computation the trainer differentiates.
//! Values are computed at node construction; `backward` walks the tape in
//! reverse, accumulating gradients additively (shared parameter leaves just
//! receive multiple contributions). Every forward value and every gradient
//! is checked for non-finite entries, and failures name the node.

pub mod check;
pub mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::operators::LinearOperator;
use crate::tensor::{Scalar, Tensor};

use kernels::{BnDims, ConvDims, SsimCache, SsimParams};
use rustfft::num_complex::Complex;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

// Temporary op-level wall-clock attribution, enabled by UTOPY_PROF=1.
pub mod prof {
    use std::cell::RefCell;
    use std::collections::HashMap;
    use std::time::Instant;

    thread_local! {
        static ACC: RefCell<HashMap<&'static str, (f64, u64)>> = RefCell::new(HashMap::new());
        static MARK: RefCell<Option<Instant>> = const { RefCell::new(None) };
    }

    pub fn enabled() -> bool {
        std::env::var_os("UTOPY_PROF").is_some()
    }

    pub fn mark() {
        MARK.with(|m| *m.borrow_mut() = Some(Instant::now()));
    }

    pub fn lap(key: &'static str) {
        MARK.with(|m| {
            let mut m = m.borrow_mut();
            if let Some(prev) = *m {
                let dt = prev.elapsed().as_secs_f64();
                ACC.with(|a| {
                    let mut a = a.borrow_mut();
                    let e = a.entry(key).or_insert((0.0, 0));
                    e.0 += dt;
                    e.1 += 1;
                });
            }
            *m = Some(Instant::now());
        });
    }

    pub fn dump() {
        ACC.with(|a| {
            let a = a.borrow();
            let mut rows: Vec<_> = a.iter().map(|(k, v)| (*k, v.0, v.1)).collect();
            rows.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
            for (k, secs, n) in rows {
                println!("  {k:24} {:10.1} ms {n:8} calls", secs * 1e3);
            }
        });
    }

    pub fn reset() {
        ACC.with(|a| a.borrow_mut().clear());
        MARK.with(|m| *m.borrow_mut() = None);
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b * y with scalar constants.
    LinComb(T, NodeId, T, NodeId),
    /// a * x + b elementwise with scalar constants.
    Affine(NodeId, T, T),
    /// Elementwise product with a constant tensor.
    MaskMul(NodeId, Tensor<T>),
    /// One-element node `s` broadcast-multiplied onto `x`.
    ScalarMul { s: NodeId, x: NodeId },
    Square(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        dims: ConvDims,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        dims: ConvDims,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        mean: Tensor<T>,
        var: Tensor<T>,
        dims: BnDims,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: Tensor<T>,
        rvar: Tensor<T>,
        eps: T,
        dims: BnDims,
    },
    Sum(NodeId),
    Mean(NodeId),
    Abs(NodeId),
    /// Euclidean norm of each leading-index slice: [lead, rest] -> [lead].
    L2PerRow(NodeId),
    FftMag2 {
        x: NodeId,
        spec: Vec<Complex<T>>,
        planes: usize,
        h: usize,
        w: usize,
    },
    Ssim {
        a: NodeId,
        b: NodeId,
        window: Vec<T>,
        params: SsimParams<T>,
        cache: Box<SsimCache<T>>,
        planes: usize,
        h: usize,
        w: usize,
    },
    LinOp {
        x: NodeId,
        op: Arc<dyn LinearOperator<T>>,
        adjoint: bool,
    },
    Reshape(NodeId),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul { .. } => "scalar-mul",
            Op::LinComb(..) => "lincomb",
            Op::Affine(..) => "affine",
            Op::MaskMul(..) => "mask-mul",
            Op::Square(..) => "square",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv-transpose2d",
            Op::AvgPool2(..) => "avgpool2",
            Op::Upsample2(..) => "upsample2",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::BnTrain { .. } => "batchnorm-train",
            Op::BnEval { .. } => "batchnorm-eval",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::L2PerRow(..) => "l2-per-row",
            Op::FftMag2 { .. } => "fft-magnitude",
            Op::Ssim { .. } => "ssim",
            Op::LinOp { .. } => "linear-operator",
            Op::Reshape(..) => "reshape",
        }
    }

    fn bwd_name(&self) -> &'static str {
        match self {
            Op::Leaf => "bwd:leaf",
            Op::Add(..) => "bwd:add",
            Op::Sub(..) => "bwd:sub",
            Op::Mul(..) => "bwd:mul",
            Op::ScalarMul { .. } => "bwd:scalar-mul",
            Op::LinComb(..) => "bwd:lincomb",
            Op::Affine(..) => "bwd:affine",
            Op::MaskMul(..) => "bwd:mask-mul",
            Op::Square(..) => "bwd:square",
            Op::Matmul { .. } => "bwd:matmul",
            Op::Conv2d { .. } => "bwd:conv2d",
            Op::ConvT2d { .. } => "bwd:conv-transpose2d",
            Op::AvgPool2(..) => "bwd:avgpool2",
            Op::Upsample2(..) => "bwd:upsample2",
            Op::Relu(..) => "bwd:relu",
            Op::Gelu(..) => "bwd:gelu",
            Op::BnTrain { .. } => "bwd:batchnorm-train",
            Op::BnEval { .. } => "bwd:batchnorm-eval",
            Op::Sum(..) => "bwd:sum",
            Op::Mean(..) => "bwd:mean",
            Op::Abs(..) => "bwd:abs",
            Op::L2PerRow(..) => "bwd:l2-per-row",
            Op::FftMag2 { .. } => "bwd:fft-magnitude",
            Op::Ssim { .. } => "bwd:ssim",
            Op::LinOp { .. } => "bwd:linear-operator",
            Op::Reshape(..) => "bwd:reshape",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    label: String,
}

/// Per-channel batch statistics recorded by train-mode normalization nodes,
/// keyed by the layer path. The trainer folds these into running statistics
/// after the optimizer step so graph building never mutates module state.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub path: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<BnBatchStats<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        if prof::enabled() {
            prof::mark();
        }
        Tape { nodes: Vec::new(), bn_stats: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    /// Batch statistics recorded by train-mode normalization nodes, in
    /// construction order.
    pub fn bn_batch_stats(&self) -> &[BnBatchStats<T>] {
        &self.bn_stats
    }

    fn node_tag(&self, idx: usize) -> String {
        let n = &self.nodes[idx];
        if n.label.is_empty() {
            format!("node {} ({})", idx, n.op.name())
        } else {
            format!("node {} ({} '{}')", idx, n.op.name(), n.label)
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool, label: String) -> Result<NodeId> {
        if prof::enabled() {
            prof::lap(op.name());
        }
        let idx = self.nodes.len();
        let finite = value.all_finite();
        if prof::enabled() {
            prof::lap("(finite-check)");
        }
        if !finite {
            let tag = if label.is_empty() {
                format!("node {} ({})", idx, op.name())
            } else {
                format!("node {} ({} '{}')", idx, op.name(), label)
            };
            return Err(Error::Numeric(format!("non-finite value in {tag}")));
        }
        self.nodes.push(Node { op, value, needs_grad, label });
        Ok(NodeId(idx))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Contract(format!(
                "{ctx}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // -- graph builders ------------------------------------------------------

    /// Non-trainable input node.
    pub fn input(&mut self, value: Tensor<T>, label: &str) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, label.to_owned())
    }

    /// Trainable parameter node; gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>, label: &str) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, label.to_owned())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng, String::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng, String::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng, String::new())
    }

    /// Broadcast product of a one-element node with a tensor node.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "scalar-mul coefficient must have one element, got shape {:?}",
                self.nodes[s.0].value.shape()
            )));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let v = self.nodes[x.0].value.scale(sv);
        let ng = self.needs(s) || self.needs(x);
        self.push(Op::ScalarMul { s, x }, v, ng, String::new())
    }

    /// ca * a + cb * b with scalar coefficients.
    pub fn lincomb(&mut self, ca: T, a: NodeId, cb: T, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "lincomb")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let v = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| ca.mul_add(x, cb * y)).collect(),
        )?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::LinComb(ca, a, cb, b), v, ng, String::new())
    }

    /// a * x + b elementwise with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: T, b: T) -> Result<NodeId> {
        let v = self.nodes[x.0].value.map(|xv| a.mul_add(xv, b));
        let ng = self.needs(x);
        self.push(Op::Affine(x, a, b), v, ng, String::new())
    }

    /// Elementwise product with a constant tensor (e.g. a frequency mask).
    pub fn mask_mul(&mut self, x: NodeId, mask: Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != mask.shape() {
            return Err(Error::Contract(format!(
                "mask-mul: shape mismatch {:?} vs {:?}",
                self.shape(x),
                mask.shape()
            )));
        }
        let v = self.nodes[x.0].value.mul(&mask)?;
        let ng = self.needs(x);
        self.push(Op::MaskMul(x, mask), v, ng, String::new())
    }

    /// Elementwise square.
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x.0].value.map(|xv| xv * xv);
        let ng = self.needs(x);
        self.push(Op::Square(x), v, ng, String::new())
    }

    /// Matrix product of 2-d tensors: [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Contract(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b, m, k, n }, out, ng, String::new())
    }

    /// Zero-padded stride-1 convolution. x is [b, ci, h, w], w is
    /// [co, ci, kh, kw] with odd kh, kw; optional bias is [co].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Contract(format!("conv2d: need 4-d input/weight, got {xs:?} and {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::Contract(format!("conv2d: weight expects {} channels, input has {}", ws[1], xs[1])));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::Contract(format!("conv2d: kernel dims must be odd, got {}x{}", ws[2], ws[3])));
        }
        if let Some(bn) = bias {
            if self.shape(bn) != [ws[0]] {
                return Err(Error::Contract(format!(
                    "conv2d: bias shape {:?} does not match {} output channels",
                    self.shape(bn),
                    ws[0]
                )));
            }
        }
        let dims = ConvDims { b: xs[0], ci: xs[1], co: ws[0], h: xs[2], w: xs[3], kh: ws[2], kw: ws[3] };
        let mut out = Tensor::zeros(&[dims.b, dims.co, dims.h, dims.w]);
        kernels::conv2d_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bias.map(|bn| self.nodes[bn.0].value.data()),
            out.data_mut(),
            &dims,
        );
        let ng = self.needs(x) || self.needs(w) || bias.map(|bn| self.needs(bn)).unwrap_or(false);
        self.push(Op::Conv2d { x, w, bias, dims }, out, ng, String::new())
    }

    /// Transposed convolution (spatial adjoint of `conv2d`). x is
    /// [b, ci, h, w], w is [ci, co, kh, kw] with odd kh, kw.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Contract(format!(
                "conv-transpose2d: need 4-d input/weight, got {xs:?} and {ws:?}"
            )));
        }
        if ws[0] != xs[1] {
            return Err(Error::Contract(format!(
                "conv-transpose2d: weight expects {} input channels, input has {}",
                ws[0], xs[1]
            )));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv-transpose2d: kernel dims must be odd, got {}x{}",
                ws[2], ws[3]
            )));
        }
        let dims = ConvDims { b: xs[0], ci: xs[1], co: ws[1], h: xs[2], w: xs[3], kh: ws[2], kw: ws[3] };
        let mut out = Tensor::zeros(&[dims.b, dims.co, dims.h, dims.w]);
        kernels::conv_transpose2d_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            out.data_mut(),
            &dims,
        );
        let ng = self.needs(x) || self.needs(w);
        self.push(Op::ConvT2d { x, w, dims }, out, ng, String::new())
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::Contract(format!("avgpool2: need 4-d input with even spatial dims, got {xs:?}")));
        }
        let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2] / 2, xs[3] / 2]);
        kernels::avgpool2_fwd(self.nodes[x.0].value.data(), out.data_mut(), xs[0] * xs[1], xs[2], xs[3]);
        let ng = self.needs(x);
        self.push(Op::AvgPool2(x), out, ng, String::new())
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!("upsample2: need 4-d input, got {xs:?}")));
        }
        let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2] * 2, xs[3] * 2]);
        kernels::upsample2_fwd(self.nodes[x.0].value.data(), out.data_mut(), xs[0] * xs[1], xs[2], xs[3]);
        let ng = self.needs(x);
        self.push(Op::Upsample2(x), out, ng, String::new())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = Tensor::zeros(self.shape(x));
        kernels::relu_fwd(self.nodes[x.0].value.data(), out.data_mut());
        let ng = self.needs(x);
        self.push(Op::Relu(x), out, ng, String::new())
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = Tensor::zeros(self.shape(x));
        kernels::gelu_fwd(self.nodes[x.0].value.data(), out.data_mut());
        let ng = self.needs(x);
        self.push(Op::Gelu(x), out, ng, String::new())
    }

    fn bn_dims(&self, x: NodeId, gamma: NodeId, beta: NodeId, ctx: &str) -> Result<BnDims> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Contract(format!("{ctx}: need 4-d input, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Contract(format!(
                "{ctx}: scale/shift must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(BnDims { b: xs[0], c, hw: xs[2] * xs[3] })
    }

    /// Train-mode normalization over batch and spatial dims per channel.
    /// Records batch statistics under `path` for the trainer to consume.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        path: &str,
    ) -> Result<NodeId> {
        let dims = self.bn_dims(x, gamma, beta, "batchnorm-train")?;
        let mut out = Tensor::zeros(self.shape(x));
        let mut mean = Tensor::zeros(&[dims.c]);
        let mut var = Tensor::zeros(&[dims.c]);
        kernels::bn_train_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
            out.data_mut(),
            mean.data_mut(),
            var.data_mut(),
            &dims,
        );
        self.bn_stats.push(BnBatchStats { path: path.to_owned(), mean: mean.clone(), var: var.clone() });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::BnTrain { x, gamma, beta, eps, mean, var, dims }, out, ng, path.to_owned())
    }

    /// Eval-mode normalization using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: Tensor<T>,
        rvar: Tensor<T>,
        eps: T,
    ) -> Result<NodeId> {
        let dims = self.bn_dims(x, gamma, beta, "batchnorm-eval")?;
        if rmean.shape() != [dims.c] || rvar.shape() != [dims.c] {
            return Err(Error::Contract(format!(
                "batchnorm-eval: running stats must have shape [{}], got {:?} and {:?}",
                dims.c,
                rmean.shape(),
                rvar.shape()
            )));
        }
        let mut out = Tensor::zeros(self.shape(x));
        kernels::bn_eval_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            rmean.data(),
            rvar.data(),
            eps,
            out.data_mut(),
            &dims,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::BnEval { x, gamma, beta, rmean, rvar, eps, dims }, out, ng, String::new())
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::from_vec(&[1], vec![self.nodes[x.0].value.sum()])?;
        let ng = self.needs(x);
        self.push(Op::Sum(x), v, ng, String::new())
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::from_vec(&[1], vec![self.nodes[x.0].value.mean()])?;
        let ng = self.needs(x);
        self.push(Op::Mean(x), v, ng, String::new())
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x.0].value.map(|xv| xv.abs());
        let ng = self.needs(x);
        self.push(Op::Abs(x), v, ng, String::new())
    }

    /// Euclidean norm of each leading-index slice: [lead, ...] -> [lead].
    pub fn l2_per_row(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(Error::Contract("l2-per-row: need at least 1-d input".into()));
        }
        let lead = xs[0];
        let rest = self.nodes[x.0].value.numel() / lead.max(1);
        let data = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(lead);
        for i in 0..lead {
            let row = &data[i * rest..(i + 1) * rest];
            let mut acc = T::zero();
            for &v in row {
                acc = v.mul_add(v, acc);
            }
            out.push(acc.sqrt());
        }
        let v = Tensor::from_vec(&[lead], out)?;
        let ng = self.needs(x);
        self.push(Op::L2PerRow(x), v, ng, String::new())
    }

    /// Magnitude of the orthonormal 2-D DFT of each trailing (h, w) plane.
    pub fn fft2_magnitude(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Contract(format!("fft-magnitude: need at least 2-d input, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.nodes[x.0].value.numel() / (h * w);
        let mut mag = Tensor::zeros(&xs);
        let spec = kernels::fft2_mag_fwd(self.nodes[x.0].value.data(), mag.data_mut(), planes, h, w);
        let ng = self.needs(x);
        self.push(Op::FftMag2 { x, spec, planes, h, w }, mag, ng, String::new())
    }

    /// Mean structural similarity over valid Gaussian windows; inputs are
    /// [b, c, h, w] with h, w >= win. Returns a scalar node.
    pub fn ssim(&mut self, a: NodeId, b: NodeId, win: usize, sigma: f64, c1: T, c2: T) -> Result<NodeId> {
        self.same_shape(a, b, "ssim")?;
        let xs = self.shape(a).to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!("ssim: need 4-d input, got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        if win % 2 == 0 || win == 0 {
            return Err(Error::Contract(format!("ssim: window must be odd and positive, got {win}")));
        }
        if h < win || w < win {
            return Err(Error::Contract(format!(
                "ssim: image {h}x{w} is smaller than the {win}x{win} window"
            )));
        }
        let planes = xs[0] * xs[1];
        let window = kernels::gaussian_window::<T>(win, sigma);
        let params = SsimParams { win, c1, c2 };
        let (mean, cache) = kernels::ssim_fwd(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &window,
            &params,
            planes,
            h,
            w,
        );
        let v = Tensor::from_vec(&[1], vec![mean])?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Ssim { a, b, window, params, cache: Box::new(cache), planes, h, w }, v, ng, String::new())
    }

    /// Apply a linear operator (or its adjoint) to the trailing dim of x.
    pub fn linop(&mut self, x: NodeId, op: Arc<dyn LinearOperator<T>>, adjoint: bool) -> Result<NodeId> {
        let v = if adjoint {
            op.adjoint(&self.nodes[x.0].value)?
        } else {
            op.apply(&self.nodes[x.0].value)?
        };
        let ng = self.needs(x);
        let label = op.name().to_owned();
        self.push(Op::LinOp { x, op, adjoint }, v, ng, label)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[x.0].value.reshaped(&shape)?;
        let ng = self.needs(x);
        self.push(Op::Reshape(x), v, ng, String::new())
    }

    // -- reverse pass --------------------------------------------------------

    /// Gradient of the scalar `root` with respect to every node that needs
    /// one. Nodes built after `root` are ignored.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::from_vec(&[1], vec![T::one()])?);
        let timing = prof::enabled();
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if timing {
                prof::mark();
            }
            let finite = g.all_finite();
            if timing {
                prof::lap("(grad-finite-check)");
            }
            if !finite {
                return Err(Error::Numeric(format!("non-finite value in {}", self.node_tag(idx))));
            }
            self.propagate(idx, &g, &mut grads)?;
            if timing {
                prof::lap(self.nodes[idx].op.bwd_name());
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                let d = delta.data();
                for (gv, &dv) in g.data_mut().iter_mut().zip(d) {
                    *gv = *gv + dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(&self.nodes[b.0].value)?);
                self.accumulate(grads, *b, g.mul(&self.nodes[a.0].value)?);
            }
            Op::LinComb(ca, a, cb, b) => {
                self.accumulate(grads, *a, g.scale(*ca));
                self.accumulate(grads, *b, g.scale(*cb));
            }
            Op::Affine(x, a, _) => {
                self.accumulate(grads, *x, g.scale(*a));
            }
            Op::MaskMul(x, mask) => {
                self.accumulate(grads, *x, g.mul(mask)?);
            }
            Op::ScalarMul { s, x } => {
                if self.needs(*x) {
                    let sv = self.nodes[s.0].value.data()[0];
                    self.accumulate(grads, *x, g.scale(sv));
                }
                if self.needs(*s) {
                    let ds = self.nodes[x.0].value.dot(g)?;
                    let shaped = Tensor::from_vec(self.nodes[s.0].value.shape(), vec![ds])?;
                    self.accumulate(grads, *s, shaped);
                }
            }
            Op::Square(x) => {
                let two = T::of_f64(2.0);
                let dx = g.mul(&self.nodes[x.0].value)?.scale(two);
                self.accumulate(grads, *x, dx);
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[*m, *k]);
                    kernels::mm_nt(g.data(), self.nodes[b.0].value.data(), da.data_mut(), *m, *n, *k);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[*k, *n]);
                    kernels::mm_tn(self.nodes[a.0].value.data(), g.data(), db.data_mut(), *m, *k, *n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, bias, dims } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    kernels::conv2d_bwd_input(g.data(), self.nodes[w.0].value.data(), dx.data_mut(), dims);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    kernels::conv2d_bwd_weight(self.nodes[x.0].value.data(), g.data(), dw.data_mut(), dims);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(bn) = bias {
                    if self.needs(*bn) {
                        let mut dbias = Tensor::zeros(&[dims.co]);
                        kernels::conv2d_bwd_bias(g.data(), dbias.data_mut(), dims);
                        self.accumulate(grads, *bn, dbias);
                    }
                }
            }
            Op::ConvT2d { x, w, dims } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    kernels::conv_transpose2d_bwd_input(g.data(), self.nodes[w.0].value.data(), dx.data_mut(), dims);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    kernels::conv_transpose2d_bwd_weight(
                        self.nodes[x.0].value.data(),
                        g.data(),
                        dw.data_mut(),
                        dims,
                    );
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                kernels::avgpool2_bwd(g.data(), dx.data_mut(), xs[0] * xs[1], xs[2], xs[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                kernels::upsample2_bwd(g.data(), dx.data_mut(), xs[0] * xs[1], xs[2], xs[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::relu_bwd(self.nodes[x.0].value.data(), g.data(), dx.data_mut());
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::gelu_bwd(self.nodes[x.0].value.data(), g.data(), dx.data_mut());
                self.accumulate(grads, *x, dx);
            }
            Op::BnTrain { x, gamma, beta, eps, mean, var, dims } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let mut dgamma = Tensor::zeros(&[dims.c]);
                let mut dbeta = Tensor::zeros(&[dims.c]);
                kernels::bn_train_bwd(
                    self.nodes[x.0].value.data(),
                    g.data(),
                    self.nodes[gamma.0].value.data(),
                    mean.data(),
                    var.data(),
                    *eps,
                    dx.data_mut(),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                    dims,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BnEval { x, gamma, beta, rmean, rvar, eps, dims } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let mut dgamma = Tensor::zeros(&[dims.c]);
                let mut dbeta = Tensor::zeros(&[dims.c]);
                kernels::bn_eval_bwd(
                    self.nodes[x.0].value.data(),
                    g.data(),
                    self.nodes[gamma.0].value.data(),
                    rmean.data(),
                    rvar.data(),
                    *eps,
                    dx.data_mut(),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                    dims,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gs));
            }
            Op::Mean(x) => {
                let n = T::of_f64(self.nodes[x.0].value.numel() as f64);
                let gs = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gs));
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let dx = Tensor::from_vec(
                    self.shape(*x),
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::L2PerRow(x) => {
                let xs = self.shape(*x);
                let lead = xs[0];
                let rest = self.nodes[x.0].value.numel() / lead.max(1);
                let data = self.nodes[x.0].value.data();
                let norms = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); data.len()];
                for i in 0..lead {
                    // Subgradient 0 at the origin.
                    if norms[i] > T::zero() {
                        let s = g.data()[i] / norms[i];
                        for (d, &v) in dx[i * rest..(i + 1) * rest].iter_mut().zip(&data[i * rest..(i + 1) * rest])
                        {
                            *d = s * v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::FftMag2 { x, spec, planes, h, w } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::fft2_mag_bwd(
                    spec,
                    self.nodes[idx].value.data(),
                    g.data(),
                    dx.data_mut(),
                    *planes,
                    *h,
                    *w,
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Ssim { a, b, window, params, cache, planes, h, w } => {
                let mut da = Tensor::zeros(self.shape(*a));
                let mut db = Tensor::zeros(self.shape(*b));
                kernels::ssim_bwd(
                    self.nodes[a.0].value.data(),
                    self.nodes[b.0].value.data(),
                    window,
                    params,
                    cache,
                    g.data()[0],
                    da.data_mut(),
                    db.data_mut(),
                    *planes,
                    *h,
                    *w,
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::LinOp { x, op, adjoint } => {
                let dx = if *adjoint { op.apply(g)? } else { op.adjoint(g)? };
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshaped(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Binds named parameters onto a tape, deduplicating by path so that a
/// parameter used in several places maps to one leaf (its gradient then
/// accumulates across uses).
pub struct Binder {
    by_path: HashMap<String, NodeId>,
    order: Vec<String>,
    trainable: bool,
}

impl Binder {
    /// `trainable` decides whether bound parameters receive gradients;
    /// inference passes bind everything frozen.
    pub fn new(trainable: bool) -> Self {
        Binder { by_path: HashMap::new(), order: Vec::new(), trainable }
    }

    pub fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, path: &str, value: &Tensor<T>) -> Result<NodeId> {
        if let Some(&id) = self.by_path.get(path) {
            return Ok(id);
        }
        let id = if self.trainable {
            tape.param(value.clone(), path)?
        } else {
            tape.input(value.clone(), path)?
        };
        self.by_path.insert(path.to_owned(), id);
        self.order.push(path.to_owned());
        Ok(id)
    }

    /// Bound (path, node) pairs in first-bind order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.order.iter().map(move |p| (p.as_str(), self.by_path[p]))
    }

    pub fn get(&self, path: &str) -> Option<NodeId> {
        self.by_path.get(path).copied()
    }
}

#[cfg(test)]
mod tests;
