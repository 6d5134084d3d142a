//! Dense 2-D convolution kernels and the small tensor vocabulary the
//! artifact model is written in.
//!
//! All convolutions are "same"-size with zero padding. The forward
//! orientation is fixed by the index formula in [`conv_same`]; the
//! transpose is its exact adjoint under the standard inner product, which
//! the gradient identities of the model depend on. Everything here is a
//! pure function and safe to call from many threads.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{MarError, Result};

/// A 2-D image or mask: `H × W` of f64. Math runs in f64 throughout; the
/// 32-bit storage mode lives in [`crate::io`].
pub type Plane = Array2<f64>;

/// An `H × W × C` stack of coefficient maps or features.
pub type Stack3 = Array3<f64>;

/// A `p × p × C` stack of square convolution filters with odd `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    data: Array3<f64>,
}

impl FilterBank {
    /// Rejects even or non-square filter sizes and non-finite values.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (p, q, _c) = data.dim();
        if p != q {
            return Err(MarError::DimensionMismatch {
                context: "FilterBank::new",
                expected: "square filters".into(),
                got: format!("{p}x{q}"),
            });
        }
        if p % 2 == 0 {
            return Err(MarError::EvenFilterSize(p));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MarError::NonFinite("FilterBank::new".into()));
        }
        Ok(FilterBank { data })
    }

    pub fn zeros(size: usize, count: usize) -> Result<Self> {
        FilterBank::new(Array3::zeros((size, size, count)))
    }

    /// Bank of delta filters (1 at the center of every slice).
    pub fn deltas(size: usize, count: usize) -> Result<Self> {
        let mut bank = FilterBank::zeros(size, count)?;
        let c = size / 2;
        for i in 0..count {
            bank.data[[c, c, i]] = 1.0;
        }
        Ok(bank)
    }

    pub fn size(&self) -> usize {
        self.data.dim().0
    }

    pub fn count(&self) -> usize {
        self.data.dim().2
    }

    pub fn slice(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(2), c)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// "Same" 2-D convolution with zero padding:
///
/// `out[y, x] = Σ_{u,v} filter[u, v] · image[y + u − p/2, x + v − p/2]`
///
/// with out-of-range reads as 0. `filter` must be square with odd side
/// (enforced by [`FilterBank`] at construction).
pub fn conv_same(filter: ArrayView2<'_, f64>, image: &Plane) -> Plane {
    let (h, w) = image.dim();
    let mut out = Array2::zeros((h, w));
    conv_same_accumulate(filter, image, 1.0, &mut out);
    out
}

/// `out += scale · conv_same(filter, image)`, with contiguous-row inner
/// loops. All dense kernels below funnel through this.
fn conv_same_accumulate(
    filter: ArrayView2<'_, f64>,
    image: &Plane,
    scale: f64,
    out: &mut Plane,
) {
    let (p, q) = filter.dim();
    debug_assert_eq!(p, q);
    debug_assert_eq!(p % 2, 1);
    let (h, w) = image.dim();
    debug_assert_eq!(out.dim(), (h, w));
    let c = (p / 2) as isize;
    let contiguous;
    let image_slice = match image.as_slice() {
        Some(s) => s,
        None => {
            contiguous = image.as_standard_layout().to_owned();
            contiguous.as_slice().expect("standardized image")
        }
    };
    let out_slice = out.as_slice_mut().expect("contiguous output");
    for y in 0..h as isize {
        let out_row = &mut out_slice[(y as usize) * w..(y as usize + 1) * w];
        for u in 0..p as isize {
            let iy = y + u - c;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = &image_slice[(iy as usize) * w..(iy as usize + 1) * w];
            for v in 0..p as isize {
                let weight = scale * filter[[u as usize, v as usize]];
                if weight == 0.0 {
                    continue;
                }
                let dv = v - c;
                // Valid output x-range: 0 <= x + dv < w.
                let x0 = (-dv).max(0) as usize;
                let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                let src = &in_row[(x0 as isize + dv) as usize..(x1 as isize + dv) as usize];
                let dst = &mut out_row[x0..x1];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += weight * s;
                }
            }
        }
    }
}

/// `out += scale · adjoint-conv(filter, residual)`: the transpose
/// orientation `out[z,x] = Σ f[u,v]·r[z−u+c, x−v+c]`.
fn conv_transpose_accumulate(
    filter: ArrayView2<'_, f64>,
    residual: &Plane,
    scale: f64,
    out: &mut Plane,
) {
    let (p, q) = filter.dim();
    debug_assert_eq!(p, q);
    let (h, w) = residual.dim();
    debug_assert_eq!(out.dim(), (h, w));
    let c = (p / 2) as isize;
    let contiguous;
    let resid_slice = match residual.as_slice() {
        Some(s) => s,
        None => {
            contiguous = residual.as_standard_layout().to_owned();
            contiguous.as_slice().expect("standardized residual")
        }
    };
    let out_slice = out.as_slice_mut().expect("contiguous output");
    for z in 0..h as isize {
        let out_row = &mut out_slice[(z as usize) * w..(z as usize + 1) * w];
        for u in 0..p as isize {
            let ry = z - u + c;
            if ry < 0 || ry >= h as isize {
                continue;
            }
            let in_row = &resid_slice[(ry as usize) * w..(ry as usize + 1) * w];
            for v in 0..p as isize {
                let weight = scale * filter[[u as usize, v as usize]];
                if weight == 0.0 {
                    continue;
                }
                let dv = c - v;
                let x0 = (-dv).max(0) as usize;
                let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                let src = &in_row[(x0 as isize + dv) as usize..(x1 as isize + dv) as usize];
                let dst = &mut out_row[x0..x1];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += weight * s;
                }
            }
        }
    }
}

/// Extracts channel `c` of an `(H, W, C)` stack as a contiguous plane.
fn channel_plane(stack: &Stack3, c: usize) -> Plane {
    let (h, w, _) = stack.dim();
    let mut out = Array2::zeros((h, w));
    out.assign(&stack.index_axis(ndarray::Axis(2), c));
    out
}

/// Channel-wise convolution summed over channels:
/// `Σ_n conv_same(bank[:,:,n], codes[:,:,n])`.
pub fn conv_bank_sum(bank: &FilterBank, codes: &Stack3) -> Result<Plane> {
    if bank.count() != codes.dim().2 {
        return Err(MarError::DimensionMismatch {
            context: "conv_bank_sum",
            expected: format!("{} code channels", bank.count()),
            got: format!("{}", codes.dim().2),
        });
    }
    Ok(conv_bank_sum_raw(bank.data(), codes))
}

/// [`conv_bank_sum`] on raw arrays; the caller guarantees the bank is a
/// valid odd-sized square filter stack with matching channel count.
pub fn conv_bank_sum_raw(bank: &Array3<f64>, codes: &Stack3) -> Plane {
    let (h, w, n) = codes.dim();
    let mut out = Array2::zeros((h, w));
    for ch in 0..n {
        let plane = channel_plane(codes, ch);
        conv_same_accumulate(bank.index_axis(ndarray::Axis(2), ch), &plane, 1.0, &mut out);
    }
    out
}

/// Exact adjoint of [`conv_bank_sum`] in its `codes` argument:
///
/// `out[z, w, n] = Σ_{u,v} bank[u, v, n] · residual[z − u + p/2, w − v + p/2]`
///
/// so that `⟨conv_bank_sum(B, M), R⟩ = ⟨M, conv_transpose_bank(B, R)⟩`
/// holds exactly under zero padding.
pub fn conv_transpose_bank(bank: &FilterBank, residual: &Plane) -> Stack3 {
    conv_transpose_bank_raw(bank.data(), residual)
}

/// [`conv_transpose_bank`] on raw arrays.
pub fn conv_transpose_bank_raw(bank: &Array3<f64>, residual: &Plane) -> Stack3 {
    let (h, w) = residual.dim();
    let n = bank.dim().2;
    let mut out = Array3::zeros((h, w, n));
    let mut scratch = Array2::zeros((h, w));
    for ch in 0..n {
        scratch.fill(0.0);
        conv_transpose_accumulate(
            bank.index_axis(ndarray::Axis(2), ch),
            residual,
            1.0,
            &mut scratch,
        );
        out.index_axis_mut(ndarray::Axis(2), ch).assign(&scratch);
    }
    out
}

/// Depth-wise convolution: channel `i` of the output is
/// `conv_same(dict[:,:,i], plane)`.
pub fn depthwise_conv(dict: &FilterBank, plane: &Plane) -> Stack3 {
    let (h, w) = plane.dim();
    let d = dict.count();
    let mut out = Array3::zeros((h, w, d));
    for i in 0..d {
        let conv = conv_same(dict.slice(i), plane);
        out.index_axis_mut(ndarray::Axis(2), i).assign(&conv);
    }
    out
}

/// Unfolding at the 3rd mode: row `c` is the row-major vectorization of
/// channel `c`, giving a `C × H·W` matrix.
pub fn mode3_unfold(t: &Stack3) -> Array2<f64> {
    let (h, w, c) = t.dim();
    let mut out = Array2::zeros((c, h * w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y * w + x]] = t[[y, x, ch]];
            }
        }
    }
    out
}

/// Inverse of [`mode3_unfold`].
pub fn mode3_fold(m: &Array2<f64>, h: usize, w: usize) -> Result<Stack3> {
    let (c, hw) = m.dim();
    if hw != h * w {
        return Err(MarError::DimensionMismatch {
            context: "mode3_fold",
            expected: format!("{} columns", h * w),
            got: format!("{hw}"),
        });
    }
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, ch]] = m[[ch, y * w + x]];
            }
        }
    }
    Ok(out)
}

/// Mixes the dictionary into per-sample filters: output filter `n` is
/// `Σ_i dict[:,:,i] · k[i, n]`. Bilinear in `(dict, k)`.
pub fn weighted_combine(dict: &FilterBank, k: &Array2<f64>) -> Result<FilterBank> {
    if k.dim().0 != dict.count() {
        return Err(MarError::DimensionMismatch {
            context: "weighted_combine",
            expected: format!("{} weight rows", dict.count()),
            got: format!("{}", k.dim().0),
        });
    }
    FilterBank::new(weighted_combine_raw(dict.data(), k))
}

/// [`weighted_combine`] on raw arrays.
pub fn weighted_combine_raw(dict: &Array3<f64>, k: &Array2<f64>) -> Array3<f64> {
    let (rows, n) = k.dim();
    let p = dict.dim().0;
    let mut out = Array3::zeros((p, p, n));
    for col in 0..n {
        for i in 0..rows {
            let wi = k[[i, col]];
            if wi == 0.0 {
                continue;
            }
            let slice = dict.index_axis(ndarray::Axis(2), i);
            for u in 0..p {
                for v in 0..p {
                    out[[u, v, col]] += slice[[u, v]] * wi;
                }
            }
        }
    }
    out
}

/// Gradient of `⟨conv_same(f, image), residual⟩` with respect to the
/// filter `f`:
///
/// `out[u, v] = Σ_{y,x} residual[y, x] · image[y + u − p/2, x + v − p/2]`.
///
/// This is the adjoint of the convolution in its filter argument; the
/// weight-matrix gradient of the model is assembled from it.
pub fn kernel_grad(image: &Plane, residual: &Plane, p: usize) -> Plane {
    debug_assert_eq!(p % 2, 1);
    let (h, w) = image.dim();
    debug_assert_eq!(residual.dim(), (h, w));
    let c = (p / 2) as isize;
    let img_copy;
    let image_slice = match image.as_slice() {
        Some(s) => s,
        None => {
            img_copy = image.as_standard_layout().to_owned();
            img_copy.as_slice().expect("standardized image")
        }
    };
    let res_copy;
    let resid_slice = match residual.as_slice() {
        Some(s) => s,
        None => {
            res_copy = residual.as_standard_layout().to_owned();
            res_copy.as_slice().expect("standardized residual")
        }
    };
    let mut out = Array2::zeros((p, p));
    for u in 0..p as isize {
        for v in 0..p as isize {
            let dv = v - c;
            let x0 = (-dv).max(0) as usize;
            let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
            let mut acc = 0.0;
            for y in 0..h as isize {
                let iy = y + u - c;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let r_row = &resid_slice[(y as usize) * w + x0..(y as usize) * w + x1];
                let i_row = &image_slice[(iy as usize) * w + (x0 as isize + dv) as usize
                    ..(iy as usize) * w + (x1 as isize + dv) as usize];
                acc += r_row
                    .iter()
                    .zip(i_row.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            out[[u as usize, v as usize]] = acc;
        }
    }
    out
}

/// Frobenius inner product of two planes.
pub fn inner(a: &Plane, b: &Plane) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Frobenius inner product of two stacks.
pub fn inner3(a: &Stack3, b: &Stack3) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
