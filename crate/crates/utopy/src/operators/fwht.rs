//! Fast Walsh–Hadamard transform, orthonormal scaling, natural (Sylvester)
//! ordering. The transform is its own inverse and an isometry.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// In-place transform of a power-of-two-length slice.
pub fn fwht_inplace<T: Scalar>(v: &mut [T]) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Contract(format!("fwht: length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for chunk in v.chunks_mut(2 * h) {
            let (lo, hi) = chunk.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    let scale = T::of_f64(1.0 / (n as f64).sqrt());
    for x in v.iter_mut() {
        *x = *x * scale;
    }
    Ok(())
}

/// Transform of a 1-D tensor whose length is a power of two.
pub fn fwht<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    fwht_inplace(out.data_mut())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Orthonormal Hadamard matrix of order n by the doubling recursion
    /// H_{2k} = [[H_k, H_k], [H_k, -H_k]].
    pub fn dense_hadamard(n: usize) -> Vec<f64> {
        assert!(n.is_power_of_two());
        let mut h = vec![1.0f64];
        let mut k = 1;
        while k < n {
            let mut next = vec![0.0; 4 * k * k];
            for r in 0..k {
                for c in 0..k {
                    let v = h[r * k + c];
                    next[r * 2 * k + c] = v;
                    next[r * 2 * k + k + c] = v;
                    next[(k + r) * 2 * k + c] = v;
                    next[(k + r) * 2 * k + k + c] = -v;
                }
            }
            h = next;
            k *= 2;
        }
        let s = 1.0 / (n as f64).sqrt();
        h.iter().map(|v| v * s).collect()
    }

    #[test]
    fn two_point_rotation() {
        let y = fwht(&Tensor::from_vec(&[2], vec![1.0f64, 0.0]).unwrap()).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((y.data()[0] - r).abs() < 1e-15);
        assert!((y.data()[1] - r).abs() < 1e-15);
    }

    #[test]
    fn constant_maps_to_dc() {
        let y = fwht(&Tensor::from_vec(&[4], vec![1.0f64; 4]).unwrap()).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-15);
        for &v in &y.data()[1..] {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn matches_dense_recursion_at_64() {
        let mut rng = Rng::new(7).stream("fwht-oracle");
        let x = rng.normal_tensor::<f64>(&[64]);
        let y = fwht(&x).unwrap();
        let h = dense_hadamard(64);
        for r in 0..64 {
            let mut acc = 0.0;
            for c in 0..64 {
                acc += h[r * 64 + c] * x.data()[c];
            }
            assert!((acc - y.data()[r]).abs() < 1e-12, "row {r}: {acc} vs {}", y.data()[r]);
        }
    }

    #[test]
    fn involution_and_isometry() {
        let mut rng = Rng::new(11).stream("fwht-inv");
        let x = rng.normal_tensor::<f64>(&[256]);
        let y = fwht(&x).unwrap();
        assert!((y.norm2() - x.norm2()).abs() < 1e-12);
        let z = fwht(&y).unwrap();
        for (a, b) in x.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fwht(&Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap()).is_err());
    }
}
