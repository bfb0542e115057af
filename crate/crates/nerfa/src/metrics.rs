//! Image quality metrics: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::scene::Image;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Stabilizers for unit dynamic range: `(K * L)^2` with `L = 1`.
const SSIM_C1: f64 = SSIM_K1 * SSIM_K1;
const SSIM_C2: f64 = SSIM_K2 * SSIM_K2;
const SSIM_SIGMA: f64 = 1.5;

/// Mean squared error over all components.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let n = a.pixels().len();
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n as f64)
}

/// `-10 log10(mse)` against a unit peak; zero error maps to infinity.
pub fn psnr_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    match mse(a, b) {
        Ok(m) => psnr_mse(m),
        Err(_) => f64::NAN,
    }
}

/// Mean local SSIM over a sliding Gaussian window on the grayscale images
/// (channel mean). Window is 11x11 when the smaller image side is at least
/// 11, 7x7 when it is at least 7, and smaller images are a domain error.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (h, w) = (a.height(), a.width());
    let side = match h.min(w) {
        s if s >= 11 => 11,
        s if s >= 7 => 7,
        s => {
            return Err(Error::Domain(format!(
                "image side {s} is smaller than the smallest SSIM window (7)"
            )))
        }
    };
    let kernel = gaussian_kernel(side, SSIM_SIGMA);
    let ga = grayscale(a);
    let gb = grayscale(b);

    let mut total = 0.0;
    let mut windows = 0u64;
    for top in 0..=h - side {
        for left in 0..=w - side {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..side {
                for j in 0..side {
                    let kw = kernel[i * side + j];
                    let x = ga[(top + i) * w + (left + j)];
                    let y = gb[(top + i) * w + (left + j)];
                    mu_a += kw * x;
                    mu_b += kw * y;
                    // Products grouped as kw * (p * q): x == y then makes
                    // cov bitwise equal to the variances, and swapping the
                    // arguments cannot move a rounding.
                    aa += kw * (x * x);
                    bb += kw * (y * y);
                    ab += kw * (x * y);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += numerator / denominator;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0)
        .collect()
}

fn gaussian_kernel(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side as isize - 1) / 2;
    let mut kernel = Vec::with_capacity(side * side);
    let mut sum = 0.0;
    for i in -half..=half {
        for j in -half..=half {
            let v = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}
