//! Derived 8-bit PNG visualizations: windowed grayscale rasters,
//! side-by-side panels, per-stage galleries and a minimal loss-curve
//! plot. Raw + sidecar files remain the bit-exact interchange format;
//! everything here is presentation only.

use std::io::BufWriter;
use std::path::Path;

use mar_core::tensor::Plane;
use mar_core::{MarError, Result};

fn to_u8(plane: &Plane, lo: f64, hi: f64) -> Vec<u8> {
    plane
        .iter()
        .map(|&v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| MarError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| MarError::Checkpoint(format!("png header {}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| MarError::Checkpoint(format!("png data {}: {e}", path.display())))
    .map(|_| ())
}

/// Single image windowed onto [0, 1].
pub fn write_plane_png(path: &Path, plane: &Plane) -> Result<()> {
    let (h, w) = plane.dim();
    write_gray(path, w, h, &to_u8(plane, 0.0, 1.0))
}

/// Horizontal panel of equally sized images with thin white separators.
pub fn write_panel_png(path: &Path, planes: &[(&str, &Plane)]) -> Result<()> {
    if planes.is_empty() {
        return Err(MarError::MissingInput("empty panel".into()));
    }
    let (h, w) = planes[0].1.dim();
    let sep = 2usize;
    let total_w = planes.len() * w + (planes.len() - 1) * sep;
    let mut pixels = vec![255u8; total_w * h];
    for (i, (_, plane)) in planes.iter().enumerate() {
        assert_eq!(plane.dim(), (h, w), "panel members must share shape");
        let bytes = to_u8(plane, 0.0, 1.0);
        let x0 = i * (w + sep);
        for r in 0..h {
            for c in 0..w {
                pixels[r * total_w + x0 + c] = bytes[r * w + c];
            }
        }
    }
    write_gray(path, total_w, h, &pixels)
}

/// Loss curve: log-ish vertical axis handled by linear plotting of the
/// raw values, light grid, single polyline.
pub fn write_loss_curve_png(path: &Path, losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(MarError::MissingInput("empty loss curve".into()));
    }
    let (w, h) = (640usize, 400usize);
    let margin = 32usize;
    let mut pixels = vec![255u8; w * h];

    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);

    // Axes.
    for x in margin..w - margin {
        pixels[(h - margin) * w + x] = 120;
        pixels[margin * w + x] = 230;
    }
    for y in margin..h - margin {
        pixels[y * w + margin] = 120;
        pixels[y * w + (w - margin)] = 230;
    }

    let plot_w = (w - 2 * margin) as f64;
    let plot_h = (h - 2 * margin) as f64;
    let point = |i: usize| -> (i64, i64) {
        let fx = if losses.len() == 1 {
            0.0
        } else {
            i as f64 / (losses.len() - 1) as f64
        };
        let fy = (losses[i] - lo) / span;
        (
            (margin as f64 + fx * plot_w) as i64,
            (h as f64 - margin as f64 - fy * plot_h) as i64,
        )
    };
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            pixels[y as usize * w + x as usize] = 0;
        }
    };
    for i in 1..losses.len() {
        let (x0, y0) = point(i - 1);
        let (x1, y1) = point(i);
        // Bresenham.
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y) = (x0, y0);
        let mut err = dx + dy;
        loop {
            put(x, y);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    write_gray(path, w, h, &pixels)
}
