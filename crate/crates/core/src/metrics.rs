//! Image quality metrics for unit-range images.

use crate::error::{Error, Result};
use crate::render::Image;

/// Peak signal-to-noise ratio in dB for values in [0,1], capped at 99 dB
/// when the MSE underflows meaningful precision.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(if mse < 1e-10 { 99.0 } else { -10.0 * mse.log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let w = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = w;
            sum += w;
        }
    }
    for w in k.iter_mut() {
        *w /= sum;
    }
    k
}

/// Mean structural similarity over all channels, Gaussian 11x11 window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1. Windows are only
/// evaluated where they fit entirely inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "image dims {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for ch in 0..3 {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky * SSIM_WINDOW + kx];
                        let pa = a.pixels[(y0 + ky) * w + x0 + kx][ch];
                        let pb = b.pixels[(y0 + ky) * w + x0 + kx][ch];
                        ma += wgt * pa;
                        mb += wgt * pb;
                        saa += wgt * pa * pa;
                        sbb += wgt * pb * pb;
                        sab += wgt * pa * pb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1.0;
            }
        }
    }
    Ok(total / count)
}
