//! Masked image-quality metrics: PSNR and single-scale SSIM evaluated on
//! the non-metal region only.
//!
//! SSIM uses an 11×11 Gaussian window with σ = 1.5, K1 = 0.01, K2 = 0.03
//! and unit dynamic range (images live in normalized intensity space), and
//! averages only over windows that lie fully inside the valid region.

use ndarray::Array2;

use crate::tensor::Plane;

/// Peak value for PSNR in normalized intensity space.
pub const PSNR_PEAK: f64 = 1.0;

/// SSIM parameters; defaults are the de facto standard.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Metrics for one image. PSNR defaults to the masked (non-metal)
/// region; the full-image value is carried alongside for comparison.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    /// PSNR over the non-metal region (the default everywhere).
    pub psnr_db: f64,
    /// PSNR over every pixel, metal included.
    pub psnr_full_db: f64,
    pub ssim: f64,
    pub n_pixels_evaluated: usize,
    /// Set when the masked MSE was exactly zero (identical images); psnr_db
    /// is `f64::INFINITY` in that case.
    pub psnr_infinite: bool,
}

/// Mean squared error over pixels with `mask = 1`. Returns `(mse, count)`.
pub fn masked_mse(x: &Plane, reference: &Plane, mask: &Plane) -> (f64, usize) {
    debug_assert_eq!(x.dim(), reference.dim());
    debug_assert_eq!(x.dim(), mask.dim());
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((xv, rv), &m) in x.iter().zip(reference.iter()).zip(mask.iter()) {
        if m != 0.0 {
            let d = xv - rv;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

/// `10·log10(peak² / MSE)` over the masked region. Identical inputs give
/// `f64::INFINITY`.
pub fn masked_psnr(x: &Plane, reference: &Plane, mask: &Plane, peak: f64) -> f64 {
    let (mse, _) = masked_mse(x, reference, mask);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size / 2) as isize;
    let mut w = Array2::zeros((size, size));
    let mut sum = 0.0;
    for u in 0..size as isize {
        for v in 0..size as isize {
            let du = (u - c) as f64;
            let dv = (v - c) as f64;
            let g = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            w[[u as usize, v as usize]] = g;
            sum += g;
        }
    }
    w / sum
}

/// Single-scale SSIM averaged over windows fully inside `mask = 1` and the
/// image bounds. Returns 1.0 when no valid window exists and the images are
/// identical on the mask; otherwise NaN-free by construction.
pub fn masked_ssim(x: &Plane, reference: &Plane, mask: &Plane, params: &SsimParams) -> f64 {
    debug_assert_eq!(x.dim(), reference.dim());
    let (h, w) = x.dim();
    let win = params.window;
    let half = win / 2;
    if h < win || w < win {
        // Image smaller than the window: degenerate; compare globally.
        let (mse, _) = masked_mse(x, reference, mask);
        return if mse == 0.0 { 1.0 } else { 0.0 };
    }
    let g = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        'window: for cx in half..w - half {
            // The window must sit entirely on valid pixels.
            for u in 0..win {
                for v in 0..win {
                    if mask[[cy + u - half, cx + v - half]] == 0.0 {
                        continue 'window;
                    }
                }
            }
            let (mut mx, mut mr) = (0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wgt = g[[u, v]];
                    mx += wgt * x[[cy + u - half, cx + v - half]];
                    mr += wgt * reference[[cy + u - half, cx + v - half]];
                }
            }
            let (mut vx, mut vr, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wgt = g[[u, v]];
                    let dx = x[[cy + u - half, cx + v - half]] - mx;
                    let dr = reference[[cy + u - half, cx + v - half]] - mr;
                    vx += wgt * dx * dx;
                    vr += wgt * dr * dr;
                    cov += wgt * dx * dr;
                }
            }
            let ssim = ((2.0 * mx * mr + c1) * (2.0 * cov + c2))
                / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
            total += ssim;
            count += 1;
        }
    }
    if count == 0 {
        let (mse, _) = masked_mse(x, reference, mask);
        if mse == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        total / count as f64
    }
}

/// Evaluates both metrics over the masked region (plus the full-image
/// PSNR for reference).
pub fn evaluate(x: &Plane, reference: &Plane, mask: &Plane) -> MetricReport {
    let (mse, count) = masked_mse(x, reference, mask);
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    };
    let ones = Array2::ones(x.raw_dim());
    MetricReport {
        psnr_db: psnr,
        psnr_full_db: masked_psnr(x, reference, &ones, PSNR_PEAK),
        ssim: masked_ssim(x, reference, mask, &SsimParams::default()),
        n_pixels_evaluated: count,
        psnr_infinite: mse == 0.0,
    }
}
