//! Linear forward models with exact adjoints.
//!
//! Measurement models are row subsamplers of the orthonormal Hadamard
//! transform (compressed sensing) and truncated Gaussian blurs (deblurring);
//! a dense kind backed by an explicit matrix exists for reference testing.
//! Operators act on the trailing dimension of a tensor, treating leading
//! dimensions as a batch, and are immutable after construction.

pub mod fidelity;
pub mod fwht;

pub use fidelity::{FidelityNodes, HomotopyFidelity, SyntheticPart};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use fwht::fwht_inplace;

/// A linear map with its adjoint. `apply` sends `[..., n]` to `[..., m]`;
/// `adjoint` sends `[..., m]` to `[..., n]`.
pub trait LinearOperator<T: Scalar>: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
    fn name(&self) -> &'static str;
    fn descriptor(&self) -> OperatorDescriptor;
    /// Number of apply/adjoint calls made so far (diagnostic; used to prove
    /// that a code path never touches an operator).
    fn access_count(&self) -> u64;
}

/// Serializable description of an operator, sufficient to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorDescriptor {
    HadamardCs { n: usize, m: usize, rows: Vec<usize>, seed: u64 },
    GaussianBlur { side: usize, sigma: f64 },
    Dense { rows: usize, cols: usize, data: Vec<f64> },
}

impl OperatorDescriptor {
    /// Rebuild the described operator, revalidating all invariants.
    pub fn build<T: Scalar>(&self) -> Result<Box<dyn LinearOperator<T>>> {
        match self {
            OperatorDescriptor::HadamardCs { n, m, rows, seed } => {
                if *m != rows.len() {
                    return Err(Error::Config(format!(
                        "hadamard-cs descriptor: m={} but {} rows listed",
                        m,
                        rows.len()
                    )));
                }
                Ok(Box::new(HadamardCs::new(*n, rows.clone(), *seed)?))
            }
            OperatorDescriptor::GaussianBlur { side, sigma } => {
                Ok(Box::new(GaussianBlur::new(*side, *sigma)?))
            }
            OperatorDescriptor::Dense { rows, cols, data } => {
                let matrix = Tensor::from_vec(&[*rows, *cols], data.iter().map(|&v| T::of_f64(v)).collect())?;
                Ok(Box::new(Dense::new(matrix)?))
            }
        }
    }
}

/// Validates that the trailing dimension equals `want` and returns
/// (leading element count, trailing length).
fn check_trailing<T: Scalar>(x: &Tensor<T>, want: usize, ctx: &str) -> Result<usize> {
    match x.shape().last() {
        Some(&last) if last == want => Ok(x.numel() / want),
        _ => Err(Error::Contract(format!(
            "{ctx}: trailing dim of shape {:?} must be {want}",
            x.shape()
        ))),
    }
}

fn out_shape(x_shape: &[usize], out_len: usize) -> Vec<usize> {
    let mut s = x_shape.to_vec();
    *s.last_mut().expect("shape checked non-empty") = out_len;
    s
}

// ---------------------------------------------------------------------------
// Hadamard-row subsampling.
// ---------------------------------------------------------------------------

/// Rows of the orthonormal Hadamard matrix, selected by index. Requires n a
/// power of 4 so the vector is a flattened square image with power-of-two
/// sides.
pub struct HadamardCs {
    n: usize,
    rows: Vec<usize>,
    seed: u64,
    accesses: AtomicU64,
}

impl HadamardCs {
    pub fn new(n: usize, rows: Vec<usize>, seed: u64) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() || n.trailing_zeros() % 2 != 0 {
            return Err(Error::Contract(format!("hadamard-cs: n={n} must be a power of 4")));
        }
        if rows.is_empty() || rows.len() > n {
            return Err(Error::Contract(format!(
                "hadamard-cs: need between 1 and {n} rows, got {}",
                rows.len()
            )));
        }
        let mut seen = vec![false; n];
        for &r in &rows {
            if r >= n {
                return Err(Error::Contract(format!("hadamard-cs: row index {r} out of range [0, {n})")));
            }
            if seen[r] {
                return Err(Error::Contract(format!("hadamard-cs: duplicate row index {r}")));
            }
            seen[r] = true;
        }
        Ok(HadamardCs { n, rows, seed, accesses: AtomicU64::new(0) })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

impl<T: Scalar> LinearOperator<T> for HadamardCs {
    fn in_len(&self) -> usize {
        self.n
    }

    fn out_len(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let lead = check_trailing(x, self.n, "hadamard-cs apply")?;
        let m = self.rows.len();
        let mut out = Tensor::zeros(&out_shape(x.shape(), m));
        let mut buf = vec![T::zero(); self.n];
        for i in 0..lead {
            buf.copy_from_slice(&x.data()[i * self.n..(i + 1) * self.n]);
            fwht_inplace(&mut buf)?;
            let orow = &mut out.data_mut()[i * m..(i + 1) * m];
            for (o, &r) in orow.iter_mut().zip(&self.rows) {
                *o = buf[r];
            }
        }
        Ok(out)
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let m = self.rows.len();
        let lead = check_trailing(y, m, "hadamard-cs adjoint")?;
        let mut out = Tensor::zeros(&out_shape(y.shape(), self.n));
        for i in 0..lead {
            let buf = &mut out.data_mut()[i * self.n..(i + 1) * self.n];
            for (&r, &v) in self.rows.iter().zip(&y.data()[i * m..(i + 1) * m]) {
                buf[r] = v;
            }
            fwht_inplace(buf)?;
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "hadamard-cs"
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::HadamardCs {
            n: self.n,
            m: self.rows.len(),
            rows: self.rows.clone(),
            seed: self.seed,
        }
    }

    fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed)
    }
}

/// Measurement/synthetic row-sampling design for compressed sensing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsDesign {
    /// Signal length; must be a power of 4.
    pub n: usize,
    /// Measurement fraction; m = round(m_over_n * n).
    pub m_over_n: f64,
    /// Augmented ratio; the synthetic operator gets round(eta * n) extra rows.
    pub eta: f64,
    /// Seed for the row permutation.
    pub seed: u64,
}

impl CsDesign {
    pub fn m(&self) -> usize {
        (self.m_over_n * self.n as f64).round() as usize
    }

    pub fn m_t(&self) -> usize {
        self.m() + (self.eta * self.n as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let (m, m_t) = (self.m(), self.m_t());
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("cs design: eta={} must lie in [0, 1)", self.eta)));
        }
        if m == 0 || m > self.n {
            return Err(Error::Config(format!("cs design: m={m} out of range [1, {}]", self.n)));
        }
        if m_t > self.n {
            return Err(Error::Config(format!("cs design: m_t={m_t} exceeds n={}", self.n)));
        }
        Ok(())
    }
}

/// Builds the measurement operator H (m rows) and the better-posed synthetic
/// operator H_t (m_t >= m rows, superset of H's). Row 0 — the constant
/// component — is always sampled; the rest come from a seeded permutation,
/// so the same seed yields nested row sets as m grows.
pub fn make_cs_pair(design: &CsDesign) -> Result<(HadamardCs, HadamardCs)> {
    design.validate()?;
    let (n, m, m_t) = (design.n, design.m(), design.m_t());
    let mut perm: Vec<usize> = (1..n).collect();
    Rng::new(design.seed).stream("cs-row-permutation").shuffle(&mut perm);
    let mut h_rows: Vec<usize> = std::iter::once(0).chain(perm[..m - 1].iter().copied()).collect();
    let mut ht_rows: Vec<usize> = std::iter::once(0).chain(perm[..m_t - 1].iter().copied()).collect();
    h_rows.sort_unstable();
    ht_rows.sort_unstable();
    Ok((HadamardCs::new(n, h_rows, design.seed)?, HadamardCs::new(n, ht_rows, design.seed)?))
}

// ---------------------------------------------------------------------------
// Gaussian blur.
// ---------------------------------------------------------------------------

/// Separable truncated Gaussian blur on square images, zero padding, output
/// size equal to input size. Half-width r = ceil(3 sigma); the 1-D kernel is
/// renormalized to sum 1 after truncation.
pub struct GaussianBlur {
    side: usize,
    sigma: f64,
    kernel: Vec<f64>,
    accesses: AtomicU64,
}

/// Truncated normalized 1-D Gaussian with half-width ceil(3 sigma).
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

impl GaussianBlur {
    pub fn new(side: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Contract(format!("gaussian-blur: sigma={sigma} must be positive")));
        }
        if side == 0 {
            return Err(Error::Contract("gaussian-blur: empty image".into()));
        }
        let kernel = gaussian_kernel_1d(sigma);
        if kernel.len() > side {
            return Err(Error::Contract(format!(
                "gaussian-blur: kernel width {} exceeds image side {side}",
                kernel.len()
            )));
        }
        Ok(GaussianBlur { side, sigma, kernel, accesses: AtomicU64::new(0) })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn half_width(&self) -> usize {
        self.kernel.len() / 2
    }

    /// One separable pass over a plane; `flip` selects correlation with the
    /// reversed kernel, which is the adjoint of the forward pass.
    fn blur_plane<T: Scalar>(&self, x: &[T], out: &mut [T], flip: bool) {
        let side = self.side;
        let r = self.kernel.len() as isize / 2;
        let k: Vec<T> = if flip {
            self.kernel.iter().rev().map(|&v| T::of_f64(v)).collect()
        } else {
            self.kernel.iter().map(|&v| T::of_f64(v)).collect()
        };
        let mut tmp = vec![T::zero(); side * side];
        // Horizontal pass.
        for row in 0..side {
            let xin = &x[row * side..(row + 1) * side];
            let xout = &mut tmp[row * side..(row + 1) * side];
            for j in 0..side {
                let mut acc = T::zero();
                for (ki, &kv) in k.iter().enumerate() {
                    let c = j as isize + ki as isize - r;
                    if c >= 0 && (c as usize) < side {
                        acc = kv.mul_add(xin[c as usize], acc);
                    }
                }
                xout[j] = acc;
            }
        }
        // Vertical pass.
        for i in 0..side {
            for j in 0..side {
                let mut acc = T::zero();
                for (ki, &kv) in k.iter().enumerate() {
                    let rr = i as isize + ki as isize - r;
                    if rr >= 0 && (rr as usize) < side {
                        acc = kv.mul_add(tmp[rr as usize * side + j], acc);
                    }
                }
                out[i * side + j] = acc;
            }
        }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, flip: bool, ctx: &str) -> Result<Tensor<T>> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let n = self.side * self.side;
        let lead = check_trailing(x, n, ctx)?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..lead {
            let src = &x.data()[i * n..(i + 1) * n];
            let mut plane = vec![T::zero(); n];
            self.blur_plane(src, &mut plane, flip);
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(&plane);
        }
        Ok(out)
    }
}

impl<T: Scalar> LinearOperator<T> for GaussianBlur {
    fn in_len(&self) -> usize {
        self.side * self.side
    }

    fn out_len(&self) -> usize {
        self.side * self.side
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, false, "gaussian-blur apply")
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(y, true, "gaussian-blur adjoint")
    }

    fn name(&self) -> &'static str {
        "gaussian-blur"
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::GaussianBlur { side: self.side, sigma: self.sigma }
    }

    fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed)
    }
}

/// Kernel-width design for a blur problem: the measurement blur uses sigma,
/// the synthetic training blur uses the narrower sigma_t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlurDesign {
    pub sigma: f64,
    pub sigma_t: f64,
}

impl BlurDesign {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_t && self.sigma_t < self.sigma) {
            return Err(Error::Config(format!(
                "blur design: need 0 < sigma_t < sigma, got sigma={} sigma_t={}",
                self.sigma, self.sigma_t
            )));
        }
        Ok(())
    }
}

/// Measurement blur and narrower synthetic blur for `side`-pixel images.
pub fn make_blur_pair(design: &BlurDesign, side: usize) -> Result<(GaussianBlur, GaussianBlur)> {
    design.validate()?;
    Ok((GaussianBlur::new(side, design.sigma)?, GaussianBlur::new(side, design.sigma_t)?))
}

// ---------------------------------------------------------------------------
// Dense matrix (reference/testing).
// ---------------------------------------------------------------------------

/// Explicit matrix operator, kept for reference testing and tiny problems.
pub struct Dense<T: Scalar> {
    matrix: Tensor<T>,
    rows: usize,
    cols: usize,
    accesses: AtomicU64,
}

impl<T: Scalar> Dense<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Contract(format!("dense operator: need a non-empty matrix, got shape {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        Ok(Dense { matrix, rows, cols, accesses: AtomicU64::new(0) })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }
}

impl<T: Scalar> LinearOperator<T> for Dense<T> {
    fn in_len(&self) -> usize {
        self.cols
    }

    fn out_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let lead = check_trailing(x, self.cols, "dense apply")?;
        let mut out = Tensor::zeros(&out_shape(x.shape(), self.rows));
        crate::autodiff::kernels::mm_nt(x.data(), self.matrix.data(), out.data_mut(), lead, self.cols, self.rows);
        Ok(out)
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let lead = check_trailing(y, self.rows, "dense adjoint")?;
        let mut out = Tensor::zeros(&out_shape(y.shape(), self.cols));
        crate::autodiff::kernels::mm_nn(y.data(), self.matrix.data(), out.data_mut(), lead, self.rows, self.cols);
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "dense"
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::Dense {
            rows: self.rows,
            cols: self.cols,
            data: self.matrix.data().iter().map(|&v| v.into_f64()).collect(),
        }
    }

    fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn adjoint_error<O: LinearOperator<f64>>(op: &O, probes: usize, seed: u64) -> f64 {
        let mut rng = Rng::new(seed).stream("adjoint-test");
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let x = rng.normal_tensor::<f64>(&[op.in_len()]);
            let u = rng.normal_tensor::<f64>(&[op.out_len()]);
            let hx = op.apply(&x).unwrap();
            let htu = op.adjoint(&u).unwrap();
            let lhs = hx.dot(&u).unwrap();
            let rhs = x.dot(&htu).unwrap();
            let denom = (hx.norm2() * u.norm2()).max(1e-300);
            worst = worst.max((lhs - rhs).abs() / denom);
        }
        worst
    }

    #[test]
    fn hadamard_adjoint_identity() {
        let (h, ht) = make_cs_pair(&CsDesign { n: 64, m_over_n: 0.3, eta: 0.2, seed: 3 }).unwrap();
        assert!(adjoint_error(&h, 50, 1) < 1e-12);
        assert!(adjoint_error(&ht, 50, 2) < 1e-12);
    }

    #[test]
    fn cs_rows_nest_and_include_dc() {
        let d = CsDesign { n: 16, m_over_n: 0.25, eta: 0.25, seed: 9 };
        let (h, ht) = make_cs_pair(&d).unwrap();
        assert_eq!(h.rows().len(), 4);
        assert_eq!(ht.rows().len(), 8);
        assert!(h.rows().contains(&0));
        for r in h.rows() {
            assert!(ht.rows().contains(r), "row {r} of H missing from H_t");
        }
        // Zero augmentation collapses the pair.
        let (h0, ht0) = make_cs_pair(&CsDesign { eta: 0.0, ..d }).unwrap();
        assert_eq!(h0.rows(), ht0.rows());
    }

    #[test]
    fn cs_same_seed_same_rows() {
        let d = CsDesign { n: 256, m_over_n: 0.3, eta: 0.1, seed: 42 };
        let (a, _) = make_cs_pair(&d).unwrap();
        let (b, _) = make_cs_pair(&d).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn cs_gram_difference_is_psd_on_probes() {
        let d = CsDesign { n: 64, m_over_n: 0.25, eta: 0.2, seed: 5 };
        let (h, ht) = make_cs_pair(&d).unwrap();
        let mut rng = Rng::new(17).stream("psd-probes");
        for _ in 0..100 {
            let x = rng.normal_tensor::<f64>(&[64]);
            let hx = LinearOperator::<f64>::apply(&h, &x).unwrap();
            let htx = LinearOperator::<f64>::apply(&ht, &x).unwrap();
            let diff = htx.dot(&htx).unwrap() - hx.dot(&hx).unwrap();
            assert!(diff >= -1e-10, "quadratic form went negative: {diff}");
        }
    }

    #[test]
    fn blur_adjoint_identity_and_constant_interior() {
        let op = GaussianBlur::new(16, 1.2).unwrap();
        assert!(adjoint_error(&op, 50, 4) < 1e-12);
        let ones = Tensor::from_vec(&[256], vec![1.0f64; 256]).unwrap();
        let b = LinearOperator::<f64>::apply(&op, &ones).unwrap();
        // Interior pixel: kernel fully inside, sums to 1.
        let r = op.half_width();
        let mid = 8 * 16 + 8;
        assert!((b.data()[mid] - 1.0).abs() < 1e-12);
        // Corner pixel: zero padding removes mass.
        assert!(b.data()[0] < 1.0 - 1e-6, "corner should attenuate, r={r}");
    }

    #[test]
    fn blur_tiny_sigma_is_identity() {
        let op = GaussianBlur::new(8, 1e-3).unwrap();
        let mut rng = Rng::new(21).stream("blur-id");
        let x = rng.normal_tensor::<f64>(&[64]);
        let y = LinearOperator::<f64>::apply(&op, &x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_matches_dense_kernel_matrix() {
        let side = 8;
        let op = GaussianBlur::new(side, 1.0).unwrap();
        let k1 = gaussian_kernel_1d(1.0);
        let r = k1.len() as isize / 2;
        let n = side * side;
        // Independent construction: M[(i2,j2),(i1,j1)] = k2d[i2-i1+r, j2-j1+r].
        let mut m = vec![0.0f64; n * n];
        for i2 in 0..side as isize {
            for j2 in 0..side as isize {
                for i1 in 0..side as isize {
                    for j1 in 0..side as isize {
                        let (di, dj) = (i2 - i1, j2 - j1);
                        if di.abs() <= r && dj.abs() <= r {
                            m[(i2 * side as isize + j2) as usize * n + (i1 * side as isize + j1) as usize] =
                                k1[(di + r) as usize] * k1[(dj + r) as usize];
                        }
                    }
                }
            }
        }
        let mut rng = Rng::new(33).stream("blur-dense");
        let x = rng.normal_tensor::<f64>(&[n]);
        let y = LinearOperator::<f64>::apply(&op, &x).unwrap();
        for row in 0..n {
            let mut acc = 0.0;
            for col in 0..n {
                acc += m[row * n + col] * x.data()[col];
            }
            assert!((acc - y.data()[row]).abs() < 1e-10, "pixel {row}: {acc} vs {}", y.data()[row]);
        }
    }

    #[test]
    fn blur_kernel_must_fit() {
        assert!(GaussianBlur::new(8, 5.0).is_err());
    }

    #[test]
    fn dense_round_trips_descriptor() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let op = Dense::new(m).unwrap();
        let desc = LinearOperator::<f64>::descriptor(&op);
        let rebuilt = desc.build::<f64>().unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0f64, 0.0, -1.0]).unwrap();
        let y0 = LinearOperator::<f64>::apply(&op, &x).unwrap();
        let y1 = rebuilt.apply(&x).unwrap();
        assert_eq!(y0.data(), y1.data());
        assert_eq!(y0.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn descriptor_json_round_trip() {
        let (h, _) = make_cs_pair(&CsDesign { n: 16, m_over_n: 0.25, eta: 0.0, seed: 1 }).unwrap();
        let desc = LinearOperator::<f64>::descriptor(&h);
        let text = serde_json::to_string(&desc).unwrap();
        let back: OperatorDescriptor = serde_json::from_str(&text).unwrap();
        assert_eq!(desc, back);
        let op = back.build::<f64>().unwrap();
        assert_eq!(op.out_len(), 4);
    }

    #[test]
    fn access_counter_tracks_calls() {
        let (h, _) = make_cs_pair(&CsDesign { n: 16, m_over_n: 0.25, eta: 0.0, seed: 1 }).unwrap();
        let x = Tensor::from_vec(&[16], vec![1.0f64; 16]).unwrap();
        let y = LinearOperator::<f64>::apply(&h, &x).unwrap();
        let _ = LinearOperator::<f64>::adjoint(&h, &y).unwrap();
        assert_eq!(LinearOperator::<f64>::access_count(&h), 2);
    }

    #[test]
    fn rejects_bad_row_sets() {
        assert!(HadamardCs::new(15, vec![0], 0).is_err(), "non power of 4");
        assert!(HadamardCs::new(8, vec![0], 0).is_err(), "power of two but not of 4");
        assert!(HadamardCs::new(16, vec![0, 16], 0).is_err(), "out of range");
        assert!(HadamardCs::new(16, vec![0, 3, 3], 0).is_err(), "duplicate");
    }
}
