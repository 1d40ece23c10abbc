//! Image-quality metrics: peak signal-to-noise ratio and structural
//! similarity. Both are computed in double precision regardless of the
//! input scalar type so that reported numbers are stable across dtypes.

use crate::autodiff::kernels::{gaussian_window, ssim_fwd, SsimParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Window side used by [`ssim`].
pub const SSIM_WINDOW: usize = 11;
/// Gaussian width used by [`ssim`].
pub const SSIM_SIGMA: f64 = 1.5;
/// Luminance stabilizer (0.01·peak)².
pub const SSIM_C1: f64 = 1.0e-4;
/// Contrast stabilizer (0.03·peak)².
pub const SSIM_C2: f64 = 9.0e-4;

/// Peak signal-to-noise ratio in dB: `10·log10(peak² / MSE)`.
///
/// Identical inputs have zero mean-squared error and return `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.into_f64() - y.into_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean local structural similarity with an 11×11 Gaussian window (σ = 1.5)
/// over valid window positions, stabilizers C1 = 0.01², C2 = 0.03².
///
/// Accepts any tensor whose trailing two axes are the image plane; leading
/// axes are averaged over. Planes smaller than the window are a contract
/// violation.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::Contract("ssim needs at least a 2-d image".to_string()));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let planes = a.numel() / (h * w);
    let af: Vec<f64> = a.data().iter().map(|v| v.into_f64()).collect();
    let bf: Vec<f64> = b.data().iter().map(|v| v.into_f64()).collect();
    let window = gaussian_window::<f64>(SSIM_WINDOW, SSIM_SIGMA);
    let params = SsimParams { win: SSIM_WINDOW, c1: SSIM_C1, c2: SSIM_C2 };
    let (value, _) = ssim_fwd(&af, &bf, &window, &params, planes, h, w);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_images_have_infinite_psnr() {
        let x = Rng::new(1).stream("m").uniform_tensor::<f64>(&[4, 4], 0.0, 1.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_closed_forms() {
        // MSE = 0.01 at peak 1 → 20 dB; MSE = 1 → 0 dB.
        let a = Tensor::<f64>::zeros(&[100]);
        let b = Tensor::full(&[100], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let c = Tensor::full(&[100], 1.0);
        assert!((psnr(&a, &c, 1.0).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_power() {
        let mut rng = Rng::new(2).stream("mono");
        let x = rng.uniform_tensor::<f64>(&[1, 1, 32, 32], 0.0, 1.0);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.2] {
            let mut acc = 0.0;
            for trial in 0..20 {
                let mut r = Rng::new(3).stream("noise").substream(trial);
                let noisy = x.add(&r.normal_tensor::<f64>(x.shape()).scale(sigma)).unwrap();
                acc += psnr(&x, &noisy, 1.0).unwrap();
            }
            let mean = acc / 20.0;
            assert!(mean < last, "psnr should drop as noise grows: {mean} !< {last}");
            last = mean;
        }
    }

    #[test]
    fn ssim_is_one_exactly_for_equal_images() {
        let x = Rng::new(4).stream("s").uniform_tensor::<f64>(&[1, 1, 16, 16], 0.0, 1.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = Rng::new(5).stream("sym");
        for _ in 0..10 {
            let a = rng.uniform_tensor::<f64>(&[1, 1, 12, 12], 0.0, 1.0);
            let b = rng.uniform_tensor::<f64>(&[1, 1, 12, 12], 0.0, 1.0);
            let sab = ssim(&a, &b).unwrap();
            let sba = ssim(&b, &a).unwrap();
            assert_eq!(sab, sba);
            assert!((-1.0..=1.0).contains(&sab));
            assert!(sab < 1.0 - 1e-9, "distinct random images must not reach 1");
        }
    }

    #[test]
    fn ssim_constant_black_vs_white_matches_closed_form() {
        let a = Tensor::<f64>::zeros(&[1, 1, 16, 16]);
        let b = Tensor::full(&[1, 1, 16, 16], 1.0);
        // All variances vanish, so each window contributes
        // C1·C2 / ((0 + 1 + C1)·C2) = C1 / (1 + C1).
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_below_window_size() {
        let a = Tensor::<f64>::zeros(&[1, 1, 10, 10]);
        assert!(ssim(&a, &a).is_err());
    }
}
