//! Multilevel two-dimensional orthonormal Haar transform.
//!
//! The forward transform repeatedly splits the low-pass quadrant with the
//! normalized butterfly `(a+b)/√2, (a−b)/√2` along rows then columns, so the
//! whole map is an isometry and its inverse is exact.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_square_pow2(side: usize) -> Result<()> {
    if side == 0 || !side.is_power_of_two() {
        return Err(Error::Contract(format!(
            "haar transform needs a power-of-two side, got {side}"
        )));
    }
    Ok(())
}

/// Number of complete decomposition levels for a `side`×`side` plane.
pub fn max_levels(side: usize) -> usize {
    side.trailing_zeros() as usize
}

fn split_rows<T: Scalar>(plane: &mut [T], scratch: &mut [T], side: usize, extent: usize) {
    let half = extent / 2;
    let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    for r in 0..extent {
        let row = &plane[r * side..r * side + extent];
        for c in 0..half {
            scratch[c] = (row[2 * c] + row[2 * c + 1]) * inv_sqrt2;
            scratch[half + c] = (row[2 * c] - row[2 * c + 1]) * inv_sqrt2;
        }
        plane[r * side..r * side + extent].copy_from_slice(&scratch[..extent]);
    }
}

fn merge_rows<T: Scalar>(plane: &mut [T], scratch: &mut [T], side: usize, extent: usize) {
    let half = extent / 2;
    let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    for r in 0..extent {
        let row = &plane[r * side..r * side + extent];
        for c in 0..half {
            scratch[2 * c] = (row[c] + row[half + c]) * inv_sqrt2;
            scratch[2 * c + 1] = (row[c] - row[half + c]) * inv_sqrt2;
        }
        plane[r * side..r * side + extent].copy_from_slice(&scratch[..extent]);
    }
}

fn split_cols<T: Scalar>(plane: &mut [T], scratch: &mut [T], side: usize, extent: usize) {
    let half = extent / 2;
    let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    for c in 0..extent {
        for r in 0..half {
            let a = plane[(2 * r) * side + c];
            let b = plane[(2 * r + 1) * side + c];
            scratch[r] = (a + b) * inv_sqrt2;
            scratch[half + r] = (a - b) * inv_sqrt2;
        }
        for r in 0..extent {
            plane[r * side + c] = scratch[r];
        }
    }
}

fn merge_cols<T: Scalar>(plane: &mut [T], scratch: &mut [T], side: usize, extent: usize) {
    let half = extent / 2;
    let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    for c in 0..extent {
        for r in 0..half {
            let lo = plane[r * side + c];
            let hi = plane[(half + r) * side + c];
            scratch[2 * r] = (lo + hi) * inv_sqrt2;
            scratch[2 * r + 1] = (lo - hi) * inv_sqrt2;
        }
        for r in 0..extent {
            plane[r * side + c] = scratch[r];
        }
    }
}

fn plane_forward<T: Scalar>(plane: &mut [T], side: usize, levels: usize) {
    let mut scratch = vec![T::zero(); side];
    let mut extent = side;
    for _ in 0..levels {
        if extent < 2 {
            break;
        }
        split_rows(plane, &mut scratch, side, extent);
        split_cols(plane, &mut scratch, side, extent);
        extent /= 2;
    }
}

fn plane_inverse<T: Scalar>(plane: &mut [T], side: usize, levels: usize) {
    let mut scratch = vec![T::zero(); side];
    let applied = levels.min(max_levels(side));
    let mut extent = side >> applied;
    for _ in 0..applied {
        extent *= 2;
        merge_cols(plane, &mut scratch, side, extent);
        merge_rows(plane, &mut scratch, side, extent);
    }
}

/// Forward transform applied independently to each trailing `side`×`side`
/// plane. `levels` is clamped to the maximum for the given side.
pub fn haar2_forward<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Contract(format!(
            "haar transform needs square trailing planes, got shape {shape:?}"
        )));
    }
    let side = shape[shape.len() - 1];
    check_square_pow2(side)?;
    let lv = levels.min(max_levels(side));
    let mut out = x.clone();
    let area = side * side;
    for plane in out.data_mut().chunks_mut(area) {
        plane_forward(plane, side, lv);
    }
    Ok(out)
}

/// Inverse of [`haar2_forward`] at the same level count.
pub fn haar2_inverse<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Contract(format!(
            "haar transform needs square trailing planes, got shape {shape:?}"
        )));
    }
    let side = shape[shape.len() - 1];
    check_square_pow2(side)?;
    let mut out = x.clone();
    let area = side * side;
    for plane in out.data_mut().chunks_mut(area) {
        plane_inverse(plane, side, levels);
    }
    Ok(out)
}

/// Fraction of total energy carried by the largest-magnitude `frac` of
/// coefficients (e.g. `frac = 0.1` for the top decile).
pub fn top_fraction_energy<T: Scalar>(coeffs: &Tensor<T>, frac: f64) -> f64 {
    let mut mags: Vec<f64> = coeffs.data().iter().map(|v| v.into_f64().powi(2)).collect();
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let keep = ((mags.len() as f64 * frac).ceil() as usize).max(1);
    mags[..keep].iter().sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = Rng::new(7).stream("haar");
        let x = rng.normal_tensor::<f64>(&[2, 1, 16, 16]);
        for levels in [1, 2, 4] {
            let fwd = haar2_forward(&x, levels).unwrap();
            let back = haar2_inverse(&fwd, levels).unwrap();
            let err = back.sub(&x).unwrap().max_abs();
            assert!(err < 1e-12, "levels={levels}: {err}");
        }
    }

    #[test]
    fn transform_is_an_isometry() {
        let mut rng = Rng::new(8).stream("haar-iso");
        let x = rng.normal_tensor::<f64>(&[1, 1, 32, 32]);
        let fwd = haar2_forward(&x, max_levels(32)).unwrap();
        assert!((fwd.norm2() - x.norm2()).abs() < 1e-10);
    }

    #[test]
    fn constant_image_concentrates_in_one_coefficient() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 3.0);
        let fwd = haar2_forward(&x, max_levels(8)).unwrap();
        // Full decomposition of a constant puts everything in the scaling
        // coefficient: 3·8 = 24 (isometry of the all-ones direction).
        assert!((fwd.data()[0] - 24.0).abs() < 1e-12);
        let rest: f64 = fwd.data()[1..].iter().map(|v: &f64| v.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn single_level_matches_hand_butterfly() {
        let x = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fwd = haar2_forward(&x, 1).unwrap();
        // Rows: [3/√2, −1/√2; 7/√2, −1/√2], then cols: LL=(3+7)/2=5,
        // HL=(−1−1)/2=−1, LH=(3−7)/2=−2, HH=0.
        let got = fwd.data();
        assert!((got[0] - 5.0).abs() < 1e-12);
        assert!((got[1] + 1.0).abs() < 1e-12);
        assert!((got[2] + 2.0).abs() < 1e-12);
        assert!((got[3] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_square_and_non_power_of_two() {
        assert!(haar2_forward(&Tensor::<f64>::zeros(&[4, 6]), 1).is_err());
        assert!(haar2_forward(&Tensor::<f64>::zeros(&[6, 6]), 1).is_err());
    }

    #[test]
    fn top_fraction_energy_of_sparse_vector_is_total() {
        let mut v = vec![0.0; 100];
        v[3] = 5.0;
        let t = Tensor::from_vec(&[10, 10], v).unwrap();
        assert!((top_fraction_energy(&t, 0.1) - 1.0).abs() < 1e-12);
    }
}
