//! Parallel-beam CT simulation and the sinogram linear-interpolation (LI)
//! MAR baseline.
//!
//! Geometry: pixels are unit squares, the rotation center is the image
//! center, detector bins are spaced one pixel apart, and view angles are
//! uniformly spaced over a half or full rotation. Projections are line
//! integrals evaluated by bilinear-sampled ray marching; reconstruction is
//! filtered back-projection with the discrete Ram-Lak kernel applied as a
//! direct spatial convolution (no Fourier transforms anywhere).
//!
//! The corruption model is a documented simplification of full
//! polychromatic physics: projections passing through metal are amplified
//! multiplicatively and carry Poisson-approximate noise, which reproduces
//! the streak structure the artifact model encodes while staying
//! dependency-free and desk-fast.

use ndarray::Array2;
use std::f64::consts::PI;

use crate::error::{MarError, Result};
use crate::model::MaskedScene;
use crate::rng::Rng;
use crate::tensor::Plane;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Stack of projection profiles: `n_views × n_bins`, with views uniformly
/// spaced over `[0, span)` radians.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub data: Array2<f64>,
    pub span: f64,
}

impl Sinogram {
    pub fn n_views(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn angle(&self, view: usize) -> f64 {
        self.span * view as f64 / self.n_views() as f64
    }
}

/// Simulation configuration. `desk` is the default scale; `paper` matches
/// the full-scale geometry (416², 640 views over a full rotation, 641
/// detector bins).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub image_size: usize,
    pub n_views: usize,
    pub n_bins: usize,
    /// Angular span in radians: π (desk) or 2π (paper).
    pub span: f64,
    /// HU window mapped onto [0, 1] normalized intensity.
    pub hu_window: (f64, f64),
    /// Metal intensity in HU (used when rendering/segmenting metal).
    pub metal_hu: f64,
    /// Multiplicative amplification `a ≥ 1` of metal-trace projections.
    pub trace_amplification: f64,
    /// Poisson-approximate noise level σ ≥ 0 on trace-adjacent bins.
    pub noise_level: f64,
    pub seed: u64,
}

/// Detector bin count that covers the image diagonal at unit spacing.
pub fn default_n_bins(image_size: usize) -> usize {
    (2.0f64.sqrt() * image_size as f64).ceil() as usize + 1
}

impl SimConfig {
    pub fn desk() -> Self {
        SimConfig {
            image_size: 128,
            n_views: 180,
            n_bins: default_n_bins(128),
            span: PI,
            hu_window: (-1000.0, 1000.0),
            metal_hu: 3000.0,
            trace_amplification: 3.0,
            noise_level: 0.01,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        SimConfig {
            image_size: 416,
            n_views: 640,
            n_bins: 641,
            span: 2.0 * PI,
            hu_window: (-1000.0, 1000.0),
            metal_hu: 3000.0,
            trace_amplification: 3.0,
            noise_level: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(MarError::InvalidConfig(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        if self.n_views < 2 {
            return Err(MarError::InvalidConfig("n_views must be >= 2".into()));
        }
        if self.trace_amplification < 1.0 {
            return Err(MarError::InvalidConfig(
                "trace_amplification must be >= 1".into(),
            ));
        }
        if self.noise_level < 0.0 {
            return Err(MarError::InvalidConfig("noise_level must be >= 0".into()));
        }
        if self.hu_window.0 >= self.hu_window.1 {
            return Err(MarError::InvalidConfig("hu_window must have lo < hi".into()));
        }
        Ok(())
    }
}

/// Binary metal mask (1 on metal). The non-metal mask `I = 1 − metal` is
/// what [`MaskedScene`] carries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetalMask {
    metal: Plane,
}

impl MetalMask {
    pub fn new(metal: Plane) -> Result<Self> {
        for ((r, c), &v) in metal.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(MarError::NonBinaryMask { value: v, row: r, col: c });
            }
        }
        Ok(MetalMask { metal })
    }

    pub fn empty(size: usize) -> Self {
        MetalMask {
            metal: Array2::zeros((size, size)),
        }
    }

    /// Disk of metal centered at `(cy, cx)` in pixels.
    pub fn disk(size: usize, cy: f64, cx: f64, radius: f64) -> Self {
        let metal = Array2::from_shape_fn((size, size), |(r, c)| {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                1.0
            } else {
                0.0
            }
        });
        MetalMask { metal }
    }

    /// A handful of random disks away from the border.
    pub fn random_disks(size: usize, n_disks: usize, r_lo: f64, r_hi: f64, rng: &mut Rng) -> Self {
        let mut metal = Array2::zeros((size, size));
        let margin = r_hi + 4.0;
        for _ in 0..n_disks {
            let radius = rng.range(r_lo, r_hi);
            let cy = rng.range(margin, size as f64 - margin);
            let cx = rng.range(margin, size as f64 - margin);
            for r in 0..size {
                for c in 0..size {
                    let dy = r as f64 - cy;
                    let dx = c as f64 - cx;
                    if dy * dy + dx * dx <= radius * radius {
                        metal[[r, c]] = 1.0;
                    }
                }
            }
        }
        MetalMask { metal }
    }

    pub fn metal(&self) -> &Plane {
        &self.metal
    }

    pub fn non_metal(&self) -> Plane {
        self.metal.mapv(|v| 1.0 - v)
    }

    pub fn metal_pixel_count(&self) -> usize {
        self.metal.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn touches_border(&self) -> bool {
        let (h, w) = self.metal.dim();
        for c in 0..w {
            if self.metal[[0, c]] != 0.0 || self.metal[[h - 1, c]] != 0.0 {
                return true;
            }
        }
        for r in 0..h {
            if self.metal[[r, 0]] != 0.0 || self.metal[[r, w - 1]] != 0.0 {
                return true;
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Radon transform and FBP
// ---------------------------------------------------------------------------

/// Ray-marching step in pixels.
const RAY_STEP: f64 = 0.25;

fn bilinear(image: &Plane, r: f64, c: f64) -> f64 {
    let (h, w) = image.dim();
    if r <= -1.0 || c <= -1.0 || r >= h as f64 || c >= w as f64 {
        return 0.0;
    }
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let fetch = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
            0.0
        } else {
            image[[rr as usize, cc as usize]]
        }
    };
    let v00 = fetch(r0, c0);
    let v01 = fetch(r0, c0 + 1.0);
    let v10 = fetch(r0 + 1.0, c0);
    let v11 = fetch(r0 + 1.0, c0 + 1.0);
    v00 * (1.0 - fr) * (1.0 - fc) + v01 * (1.0 - fr) * fc + v10 * fr * (1.0 - fc) + v11 * fr * fc
}

/// Line integrals of `image` over `n_views` angles and `n_bins` detector
/// bins (unit spacing), for views spanning `[0, span)`.
pub fn radon_with_span(image: &Plane, n_views: usize, n_bins: usize, span: f64) -> Sinogram {
    let (h, w) = image.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let bin_center = (n_bins as f64 - 1.0) / 2.0;
    let half_len = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
    let n_steps = (2.0 * half_len / RAY_STEP).ceil() as usize;

    let mut data = Array2::zeros((n_views, n_bins));
    for view in 0..n_views {
        let theta = span * view as f64 / n_views as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        for bin in 0..n_bins {
            let s = bin as f64 - bin_center;
            // Ray: P(t) = s·n̂ + t·d̂ with n̂ = (cosθ, sinθ), d̂ = (−sinθ, cosθ),
            // in (x, y) coordinates anchored at the image center.
            let mut acc = 0.0;
            let mut t = -half_len;
            for _ in 0..n_steps {
                let x = s * cos_t - t * sin_t;
                let y = s * sin_t + t * cos_t;
                acc += bilinear(image, cy + y, cx + x);
                t += RAY_STEP;
            }
            data[[view, bin]] = acc * RAY_STEP;
        }
    }
    Sinogram { data, span }
}

/// [`radon_with_span`] at the configured geometry.
pub fn radon(image: &Plane, cfg: &SimConfig) -> Sinogram {
    radon_with_span(image, cfg.n_views, cfg.n_bins, cfg.span)
}

/// Discrete Ram-Lak kernel h[k] for |k| < n (unit detector spacing):
/// h[0] = 1/4, h[k odd] = −1/(π²k²), h[k even] = 0.
fn ramp_kernel(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; 2 * n - 1];
    for (idx, coeff) in h.iter_mut().enumerate() {
        let k = idx as isize - (n as isize - 1);
        *coeff = if k == 0 {
            0.25
        } else if k % 2 != 0 {
            -1.0 / (PI * PI * (k * k) as f64)
        } else {
            0.0
        };
    }
    h
}

/// Filtered back-projection onto an `image_size²` grid. Ramp filtering is
/// a direct spatial convolution per view; back-projection interpolates
/// linearly between bins.
pub fn fbp(sino: &Sinogram, image_size: usize) -> Plane {
    let n_views = sino.n_views();
    let n_bins = sino.n_bins();
    let kernel = ramp_kernel(n_bins);
    let k_center = n_bins as isize - 1;

    // Filter every view.
    let mut filtered = Array2::zeros((n_views, n_bins));
    for view in 0..n_views {
        for j in 0..n_bins as isize {
            let mut acc = 0.0;
            for k in 0..n_bins as isize {
                acc += kernel[(j - k + k_center) as usize] * sino.data[[view, k as usize]];
            }
            filtered[[view, j as usize]] = acc;
        }
    }

    let cy = (image_size as f64 - 1.0) / 2.0;
    let cx = cy;
    let bin_center = (n_bins as f64 - 1.0) / 2.0;
    let scale = PI / n_views as f64;

    let mut out = Array2::zeros((image_size, image_size));
    for view in 0..n_views {
        let theta = sino.angle(view);
        let (sin_t, cos_t) = theta.sin_cos();
        for r in 0..image_size {
            let y = r as f64 - cy;
            for c in 0..image_size {
                let x = c as f64 - cx;
                let s = x * cos_t + y * sin_t + bin_center;
                if s <= 0.0 || s >= (n_bins - 1) as f64 {
                    continue;
                }
                let j0 = s.floor() as usize;
                let f = s - j0 as f64;
                out[[r, c]] += filtered[[view, j0]] * (1.0 - f) + filtered[[view, j0 + 1]] * f;
            }
        }
    }
    out * scale
}

// ---------------------------------------------------------------------------
// Metal trace and LI inpainting
// ---------------------------------------------------------------------------

/// Threshold below which a projected mask value counts as zero.
const TRACE_EPS: f64 = 1e-9;

/// Binary sinogram marking every (view, bin) whose ray meets metal.
pub fn metal_trace(mask: &MetalMask, cfg: &SimConfig) -> Sinogram {
    let s = radon(mask.metal(), cfg);
    Sinogram {
        data: s.data.mapv(|v| if v > TRACE_EPS { 1.0 } else { 0.0 }),
        span: s.span,
    }
}

/// Flags raised while inpainting.
#[derive(Debug, Clone, Default)]
pub struct LiFlags {
    /// A corrupted run touched a row edge and was filled by nearest-value
    /// extension.
    pub edge_extended: bool,
    /// Rows entirely inside the trace, filled with zero.
    pub full_rows: Vec<usize>,
}

/// Replaces every maximal corrupted run of bins per view by linear
/// interpolation between the nearest clean bins. Runs touching a row edge
/// extend the nearest clean value; fully corrupted rows are zero-filled.
/// Bins outside the trace are never modified.
pub fn li_inpaint(sino: &Sinogram, trace: &Sinogram) -> (Sinogram, LiFlags) {
    assert_eq!(sino.data.dim(), trace.data.dim(), "trace geometry mismatch");
    let (n_views, n_bins) = sino.data.dim();
    let mut out = sino.data.clone();
    let mut flags = LiFlags::default();

    for view in 0..n_views {
        let mut bin = 0;
        while bin < n_bins {
            if trace.data[[view, bin]] == 0.0 {
                bin += 1;
                continue;
            }
            let start = bin;
            while bin < n_bins && trace.data[[view, bin]] != 0.0 {
                bin += 1;
            }
            let end = bin; // exclusive
            let left = start.checked_sub(1);
            let right = if end < n_bins { Some(end) } else { None };
            match (left, right) {
                (Some(l), Some(r)) => {
                    let vl = sino.data[[view, l]];
                    let vr = sino.data[[view, r]];
                    let len = (r - l) as f64;
                    for j in start..end {
                        let f = (j - l) as f64 / len;
                        out[[view, j]] = vl * (1.0 - f) + vr * f;
                    }
                }
                (Some(l), None) => {
                    flags.edge_extended = true;
                    let vl = sino.data[[view, l]];
                    for j in start..end {
                        out[[view, j]] = vl;
                    }
                }
                (None, Some(r)) => {
                    flags.edge_extended = true;
                    let vr = sino.data[[view, r]];
                    for j in start..end {
                        out[[view, j]] = vr;
                    }
                }
                (None, None) => {
                    flags.full_rows.push(view);
                    for j in start..end {
                        out[[view, j]] = 0.0;
                    }
                }
            }
        }
    }
    (
        Sinogram {
            data: out,
            span: sino.span,
        },
        flags,
    )
}

// ---------------------------------------------------------------------------
// Case simulation
// ---------------------------------------------------------------------------

/// Dilates a binary sinogram by one bin along the detector axis.
fn dilate_bins(trace: &Sinogram) -> Array2<f64> {
    let (n_views, n_bins) = trace.data.dim();
    let mut out = trace.data.clone();
    for view in 0..n_views {
        for bin in 0..n_bins {
            if trace.data[[view, bin]] != 0.0 {
                if bin > 0 {
                    out[[view, bin - 1]] = 1.0;
                }
                if bin + 1 < n_bins {
                    out[[view, bin + 1]] = 1.0;
                }
            }
        }
    }
    out
}

/// Synthesizes a metal-corrupted scene from a clean phantom and a mask:
/// the metal-trace projections are amplified by `a` and perturbed by
/// Poisson-approximate noise, and the corrupted sinogram is reconstructed
/// by FBP. The ground truth is the phantom itself.
pub fn simulate_case(phantom: &Plane, mask: &MetalMask, cfg: &SimConfig) -> Result<MaskedScene> {
    cfg.validate()?;
    if phantom.dim() != (cfg.image_size, cfg.image_size) {
        return Err(MarError::DimensionMismatch {
            context: "simulate_case",
            expected: format!("{0}x{0}", cfg.image_size),
            got: format!("{:?}", phantom.dim()),
        });
    }
    if mask.touches_border() {
        return Err(MarError::MaskOnBorder);
    }

    let s = radon(phantom, cfg);
    let trace = metal_trace(mask, cfg);

    let mut corrupted = s.data.clone();
    let a = cfg.trace_amplification;
    if a != 1.0 {
        ndarray::Zip::from(&mut corrupted)
            .and(&s.data)
            .and(&trace.data)
            .for_each(|out, &sv, &tv| {
                *out = sv + (a - 1.0) * sv * tv;
            });
    }
    if cfg.noise_level > 0.0 {
        let mut rng = Rng::new(cfg.seed);
        let noisy_region = dilate_bins(&trace);
        for ((view, bin), &in_region) in noisy_region.indexed_iter() {
            if in_region != 0.0 {
                let base = corrupted[[view, bin]].max(0.0);
                corrupted[[view, bin]] += cfg.noise_level * base.sqrt() * rng.normal();
            }
        }
    }

    let y = fbp(
        &Sinogram {
            data: corrupted,
            span: s.span,
        },
        cfg.image_size,
    );
    MaskedScene::new(y, mask.non_metal(), Some(phantom.clone()), None)
}

/// The LI baseline: re-project the corrupted image, inpaint the metal
/// trace, reconstruct. The result is the network's `X_LI` initializer.
pub fn li_mar(scene: &MaskedScene, cfg: &SimConfig) -> Result<Plane> {
    let metal = scene.mask.mapv(|v| 1.0 - v);
    let mask = MetalMask::new(metal)?;
    let s = radon(&scene.y, cfg);
    let trace = metal_trace(&mask, cfg);
    let (inpainted, _flags) = li_inpaint(&s, &trace);
    Ok(fbp(&inpainted, cfg.image_size))
}

// ---------------------------------------------------------------------------
// HU utilities, segmentation, phantoms
// ---------------------------------------------------------------------------

/// Threshold segmentation of metal in an HU-valued image.
pub fn segment_metal(image_hu: &Plane, threshold_hu: f64) -> MetalMask {
    MetalMask {
        metal: image_hu.mapv(|v| if v > threshold_hu { 1.0 } else { 0.0 }),
    }
}

/// Maps the HU window onto [0, 1], clipping outside values. Returns the
/// normalized plane and whether any value was clipped.
pub fn hu_normalize(image_hu: &Plane, window: (f64, f64)) -> (Plane, bool) {
    let (lo, hi) = window;
    let mut clipped = false;
    let out = image_hu.mapv(|v| {
        let t = (v - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&t) {
            clipped = true;
        }
        t.clamp(0.0, 1.0)
    });
    (out, clipped)
}

/// Inverse of [`hu_normalize`] on the un-clipped range.
pub fn hu_denormalize(image: &Plane, window: (f64, f64)) -> Plane {
    let (lo, hi) = window;
    image.mapv(|t| lo + t * (hi - lo))
}

/// Phantom families available to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

/// (value, semi-axis a, semi-axis b, x0, y0, rotation degrees), on [−1, 1]².
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Sub-pixel sampling factor for ellipse edges; band-limits the phantom
/// to the grid so projections and reconstructions are not dominated by
/// staircase aliasing.
const PHANTOM_SUBSAMPLE: usize = 4;

fn render_ellipses(size: usize, ellipses: &[(f64, f64, f64, f64, f64, f64)]) -> Plane {
    let half = (size as f64 - 1.0) / 2.0;
    let sub = PHANTOM_SUBSAMPLE;
    let weight = 1.0 / (sub * sub) as f64;
    let mut out = Array2::zeros((size, size));
    for &(value, a, b, x0, y0, phi_deg) in ellipses {
        let phi = phi_deg.to_radians();
        let (sin_p, cos_p) = phi.sin_cos();
        for r in 0..size {
            for c in 0..size {
                let mut coverage = 0.0;
                for i in 0..sub {
                    for j in 0..sub {
                        let rr = r as f64 - 0.5 + (i as f64 + 0.5) / sub as f64;
                        let cc = c as f64 - 0.5 + (j as f64 + 0.5) / sub as f64;
                        // y grows upward in phantom coordinates.
                        let y = (half - rr) / half;
                        let x = (cc - half) / half;
                        let dx = x - x0;
                        let dy = y - y0;
                        let xr = dx * cos_p + dy * sin_p;
                        let yr = -dx * sin_p + dy * cos_p;
                        if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                            coverage += weight;
                        }
                    }
                }
                out[[r, c]] += value * coverage;
            }
        }
    }
    out
}

/// Deterministic phantom in normalized [0, 1] intensity.
pub fn make_phantom(kind: PhantomKind, size: usize, seed: u64) -> Plane {
    match kind {
        PhantomKind::SheppLogan => {
            render_ellipses(size, &SHEPP_LOGAN).mapv(|v| v.clamp(0.0, 1.0))
        }
        PhantomKind::RandomEllipses => {
            let mut rng = Rng::new(seed);
            let mut ellipses = vec![(0.85, 0.75, 0.85, 0.0, 0.0, rng.range(-20.0, 20.0))];
            let n = 4 + rng.index(5);
            for _ in 0..n {
                ellipses.push((
                    rng.range(-0.4, 0.4),
                    rng.range(0.05, 0.35),
                    rng.range(0.05, 0.35),
                    rng.range(-0.45, 0.45),
                    rng.range(-0.45, 0.45),
                    rng.range(-90.0, 90.0),
                ));
            }
            render_ellipses(size, &ellipses).mapv(|v| v.clamp(0.0, 1.0))
        }
    }
}
