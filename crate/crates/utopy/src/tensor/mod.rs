//! Dense row-major tensors over `f32`/`f64`.
//!
//! The tensor type is deliberately small: shape + flat buffer, elementwise
//! arithmetic, and the handful of reductions the rest of the crate needs.
//! Anything structured (convolution, transforms) lives in dedicated modules.

pub mod io;

use crate::error::{Error, Result};

/// Element types supported by the engine and the on-disk container.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + rustfft::FftNum
    + std::iter::Sum
    + std::fmt::Display
    + Default
    + 'static
{
    const DTYPE: Dtype;
    fn of_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn of_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Element type tag stored in the container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Contract(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// 1-element tensor holding `v`.
    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same storage, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Contract(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.into_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|v| v * c)
    }

    /// self += c * other
    pub fn axpy(&mut self, c: T, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = c.mul_add(b, *a);
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc = a.mul_add(b, acc);
        }
        Ok(acc)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::of_f64(self.data.len() as f64)
    }

    pub fn norm2(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = v.mul_add(v, acc);
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &v in &self.data {
            let a = v.abs();
            if a > m {
                m = a;
            }
        }
        m
    }

    /// Error out if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::Numeric(format!("non-finite value in {context}")));
        }
        Ok(())
    }

    /// True when no element is NaN or infinite. The fold deliberately avoids
    /// short-circuiting so the scan vectorizes; failure is the rare path and
    /// callers only need the boolean.
    pub fn all_finite(&self) -> bool {
        let mut chunks = self.data.chunks_exact(16);
        let mut ok = true;
        for ch in &mut chunks {
            let mut lanes = true;
            for &v in ch {
                lanes &= v.is_finite();
            }
            ok &= lanes;
        }
        for &v in chunks.remainder() {
            ok &= v.is_finite();
        }
        ok
    }

    /// Rows `[i, :]` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().expect("row() on 0-d tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Concatenate along axis 0; all trailing dimensions must agree.
    pub fn stack_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack_rows: empty input".into()))?;
        let trailing = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != trailing {
                return Err(Error::Contract("stack_rows: trailing shape mismatch".into()));
            }
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// Leading dimension interpreted as a batch; everything else flattened.
/// Returns (batch, per_item_len).
pub fn batch_split(shape: &[usize]) -> (usize, usize) {
    if shape.len() <= 1 {
        (1, shape.iter().product())
    } else {
        (shape[0], shape[1..].iter().product())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_ops_respect_shapes() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.5f64, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[1.5, 2.5, 3.5, 4.5]);
        assert_eq!(a.sub(&b).unwrap().data(), &[0.5, 1.5, 2.5, 3.5]);
        assert_eq!(a.mul(&b).unwrap().data(), &[0.5, 1.0, 1.5, 2.0]);
        let c = Tensor::<f64>::zeros(&[3]);
        assert!(a.add(&c).is_err(), "shape mismatch must be rejected");
    }

    #[test]
    fn reductions() {
        let a = Tensor::from_vec(&[4], vec![1.0f64, -2.0, 3.0, -4.0]).unwrap();
        assert_eq!(a.sum(), -2.0);
        assert_eq!(a.mean(), -0.5);
        assert_eq!(a.max_abs(), 4.0);
        assert!((a.norm2() - 30.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut a = Tensor::<f64>::zeros(&[3]);
        a.data_mut()[1] = f64::NAN;
        assert!(a.check_finite("test").is_err());
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(b.check_finite("test").is_ok());
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let b = a.reshaped(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.reshaped(&[4, 2]).is_err());
    }
}
