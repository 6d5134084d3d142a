//! Channel-to-channel 2-D convolution kernels for the learned proximal
//! networks, lowered to im2col plus a matrix multiply.
//!
//! Kernels are stored as `(kh, kw, c_in, c_out)`. The forward orientation
//! matches [`crate::tensor::conv_same`] (no kernel flip, zero-padded
//! "same" output); `conv2d_transpose` is the exact adjoint in the input
//! argument and `conv2d_kernel_grad` the exact adjoint in the kernel
//! argument, which the reverse-mode engine relies on.

use ndarray::{Array2, Array3, Array4, Axis};

/// Unfolds `(H, W, C)` into a `(C·kh·kw, H·W)` patch matrix with zero
/// padding. Row index is `c·kh·kw + u·kw + v`; each row is filled by
/// shifted contiguous row copies of the channel plane.
fn im2col(input: &Array3<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (h, w, c) = input.dim();
    let (ch, cw) = (kh as isize / 2, kw as isize / 2);
    let mut col = Array2::zeros((c * kh * kw, h * w));
    let col_slice = col.as_slice_mut().expect("contiguous col");
    let mut plane = vec![0.0; h * w];
    for ci in 0..c {
        for (dst, src) in plane.iter_mut().zip(input.index_axis(Axis(2), ci).iter()) {
            *dst = *src;
        }
        for u in 0..kh {
            let du = u as isize - ch;
            for v in 0..kw {
                let dv = v as isize - cw;
                let row = ci * kh * kw + u * kw + v;
                let row_slice = &mut col_slice[row * h * w..(row + 1) * h * w];
                let x0 = (-dv).max(0) as usize;
                let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h as isize {
                    let iy = y + du;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[(iy as usize) * w + (x0 as isize + dv) as usize
                        ..(iy as usize) * w + (x1 as isize + dv) as usize];
                    row_slice[(y as usize) * w + x0..(y as usize) * w + x1]
                        .copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`].
fn col2im(col: &Array2<f64>, h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Array3<f64> {
    let (ch, cw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Array3::zeros((h, w, c));
    let col_slice = col.as_slice().expect("contiguous col");
    let mut plane = vec![0.0; h * w];
    for ci in 0..c {
        plane.fill(0.0);
        for u in 0..kh {
            let du = u as isize - ch;
            for v in 0..kw {
                let dv = v as isize - cw;
                let row = ci * kh * kw + u * kw + v;
                let row_slice = &col_slice[row * h * w..(row + 1) * h * w];
                let x0 = (-dv).max(0) as usize;
                let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h as isize {
                    let iy = y + du;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[(iy as usize) * w + (x0 as isize + dv) as usize
                        ..(iy as usize) * w + (x1 as isize + dv) as usize];
                    let src = &row_slice[(y as usize) * w + x0..(y as usize) * w + x1];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
            }
        }
        ndarray::Zip::from(out.index_axis_mut(Axis(2), ci))
            .and(&ndarray::ArrayView2::from_shape((h, w), &plane).expect("plane shape"))
            .for_each(|o, &p| *o = p);
    }
    out
}

/// Kernel as a `(c_out, c_in·kh·kw)` matrix.
fn kernel_matrix(kernel: &Array4<f64>) -> Array2<f64> {
    let (kh, kw, cin, cout) = kernel.dim();
    let mut m = Array2::zeros((cout, cin * kh * kw));
    for o in 0..cout {
        for i in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    m[[o, i * kh * kw + u * kw + v]] = kernel[[u, v, i, o]];
                }
            }
        }
    }
    m
}

/// `out[y, x, o] = Σ_{u,v,i} kernel[u, v, i, o] · input[y+u−kh/2, x+v−kw/2, i]`.
pub fn conv2d(input: &Array3<f64>, kernel: &Array4<f64>) -> Array3<f64> {
    let (h, w, cin) = input.dim();
    let (kh, kw, kcin, cout) = kernel.dim();
    assert_eq!(cin, kcin, "conv2d channel mismatch");
    let col = im2col(input, kh, kw);
    let kmat = kernel_matrix(kernel);
    let out_mat = kmat.dot(&col); // (cout, h*w)
    let mut out = Array3::zeros((h, w, cout));
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, o]] = out_mat[[o, y * w + x]];
            }
        }
    }
    out
}

/// Exact adjoint of [`conv2d`] in its input: maps `(H, W, c_out)` back to
/// `(H, W, c_in)`.
pub fn conv2d_transpose(input: &Array3<f64>, kernel: &Array4<f64>) -> Array3<f64> {
    let (h, w, cout) = input.dim();
    let (kh, kw, cin, kcout) = kernel.dim();
    assert_eq!(cout, kcout, "conv2d_transpose channel mismatch");
    let kmat = kernel_matrix(kernel); // (cout, cin*kh*kw)
    let mut in_mat = Array2::zeros((cout, h * w));
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                in_mat[[o, y * w + x]] = input[[y, x, o]];
            }
        }
    }
    let col_grad = kmat.t().dot(&in_mat); // (cin*kh*kw, h*w)
    col2im(&col_grad, h, w, cin, kh, kw)
}

/// Gradient of `⟨conv2d(input, kernel), upstream⟩` with respect to the
/// kernel: the adjoint in the kernel argument.
pub fn conv2d_kernel_grad(
    input: &Array3<f64>,
    upstream: &Array3<f64>,
    kh: usize,
    kw: usize,
) -> Array4<f64> {
    let (h, w, cin) = input.dim();
    let (uh, uw, cout) = upstream.dim();
    assert_eq!((h, w), (uh, uw), "conv2d_kernel_grad shape mismatch");
    let col = im2col(input, kh, kw); // (cin*kh*kw, h*w)
    let mut up_mat = Array2::zeros((cout, h * w));
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                up_mat[[o, y * w + x]] = upstream[[y, x, o]];
            }
        }
    }
    let kg = col.dot(&up_mat.t()); // (cin*kh*kw, cout)
    let mut out = Array4::zeros((kh, kw, cin, cout));
    for o in 0..cout {
        for i in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    out[[u, v, i, o]] = kg[[i * kh * kw + u * kw + v, o]];
                }
            }
        }
    }
    out
}
