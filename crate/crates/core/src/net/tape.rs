//! Minimal reverse-mode automatic differentiation over tensor-valued
//! nodes.
//!
//! Each forward pass records a tape of operations; `backward` replays it
//! in reverse, accumulating exact vector-Jacobian products. The op set is
//! closed and tailored to the unrolled network: elementwise arithmetic,
//! dense maps, channel convolutions, the per-channel normalization layer,
//! column normalization, channel concat/split, the artifact-model bank
//! operations and the fused weight-gradient node. Values are `f64`
//! dynamic-dimension arrays; scalars are 0-d.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix0, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::model::grad_k_raw;
use crate::net::conv2d::{conv2d, conv2d_kernel_grad, conv2d_transpose};
use crate::solver::DEGENERATE_COLUMN_EPS;
use crate::tensor::{
    conv_bank_sum_raw, conv_transpose_bank_raw, kernel_grad, weighted_combine_raw,
};

/// Variance floor added inside the normalization layers.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Tensor times a 0-d scalar node.
    MulScalar(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    /// `(m × n) + bias(m)` broadcast across columns.
    AddColBias(NodeId, NodeId),
    /// `(H × W × C) + bias(C)` broadcast across pixels.
    AddChanBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
    },
    ConvTranspose2d {
        input: NodeId,
        kernel: NodeId,
    },
    /// Per-channel normalization with statistics taken over the spatial
    /// axes of this tensor (recorded at forward time).
    NormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
    /// Per-channel affine normalization with fixed statistics.
    NormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
    ColNormalize(NodeId),
    ConcatChan(NodeId, NodeId),
    SliceChan {
        input: NodeId,
        from: usize,
        to: usize,
    },
    Reshape(NodeId),
    SumSq(NodeId),
    SumAbs(NodeId),
    WeightedCombine {
        dict: NodeId,
        k: NodeId,
    },
    ConvBankSum {
        bank: NodeId,
        codes: NodeId,
    },
    ConvTransposeBank {
        bank: NodeId,
        resid: NodeId,
    },
    /// Fused gradient of the masked fit with respect to the weighting
    /// matrix: `2⟨conv(D_i, M_n), R⟩`, matching `model::grad_k`.
    GradK {
        dict: NodeId,
        codes: NodeId,
        resid: NodeId,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Forward-pass recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for parameter initialization.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        *self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix0>()
            .expect("scalar node")
            .into_scalar()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    // -- graph construction ------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = &self.nodes[a.0].value * sv;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_col_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = as1(&self.nodes[bias.0].value).to_owned();
        let mut v = av;
        for mut col in v.columns_mut() {
            col += &bv;
        }
        self.push(v.into_dyn(), Op::AddColBias(a, bias))
    }

    pub fn add_chan_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = as3(&self.nodes[a.0].value).to_owned();
        let bv = as1(&self.nodes[bias.0].value).to_owned();
        let mut v = av;
        for c in 0..v.dim().2 {
            v.index_axis_mut(Axis(2), c).mapv_inplace(|x| x + bv[c]);
        }
        self.push(v.into_dyn(), Op::AddChanBias(a, bias))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> NodeId {
        let iv = as3(&self.nodes[input.0].value).to_owned();
        let kv = as4(&self.nodes[kernel.0].value).to_owned();
        let v = conv2d(&iv, &kv).into_dyn();
        self.push(v, Op::Conv2d { input, kernel })
    }

    pub fn conv2d_transpose(&mut self, input: NodeId, kernel: NodeId) -> NodeId {
        let iv = as3(&self.nodes[input.0].value).to_owned();
        let kv = as4(&self.nodes[kernel.0].value).to_owned();
        let v = conv2d_transpose(&iv, &kv).into_dyn();
        self.push(v, Op::ConvTranspose2d { input, kernel })
    }

    /// Normalization with statistics over the spatial axes; returns the
    /// node and the `(mean, var)` recorded for running-average updates.
    pub fn norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> (NodeId, Array1<f64>, Array1<f64>) {
        let x = as3(&self.nodes[input.0].value).to_owned();
        let g = as1(&self.nodes[gamma.0].value).to_owned();
        let b = as1(&self.nodes[beta.0].value).to_owned();
        let (h, w, c) = x.dim();
        let n = (h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let slice = x.index_axis(Axis(2), ch);
            let m = slice.sum() / n;
            let v = slice.iter().map(|&xv| (xv - m) * (xv - m)).sum::<f64>() / n;
            mean[ch] = m;
            var[ch] = v;
        }
        let mut out = x;
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
            let (m, gc, bc) = (mean[ch], g[ch], b[ch]);
            out.index_axis_mut(Axis(2), ch)
                .mapv_inplace(|xv| (xv - m) * inv * gc + bc);
        }
        let id = self.push(
            out.into_dyn(),
            Op::NormTrain {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        (id, mean, var)
    }

    /// Normalization with fixed statistics (running averages).
    pub fn norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<f64>,
        var: Array1<f64>,
    ) -> NodeId {
        let x = as3(&self.nodes[input.0].value).to_owned();
        let g = as1(&self.nodes[gamma.0].value).to_owned();
        let b = as1(&self.nodes[beta.0].value).to_owned();
        let c = x.dim().2;
        let mut out = x;
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
            let (m, gc, bc) = (mean[ch], g[ch], b[ch]);
            out.index_axis_mut(Axis(2), ch)
                .mapv_inplace(|xv| (xv - m) * inv * gc + bc);
        }
        self.push(
            out.into_dyn(),
            Op::NormEval {
                input,
                gamma,
                beta,
                mean,
                var,
            },
        )
    }

    /// Column-wise projection onto the unit sphere, matching the classical
    /// prox exactly (degenerate columns become `e₁`).
    pub fn col_normalize(&mut self, a: NodeId) -> NodeId {
        let x = as2(&self.nodes[a.0].value).to_owned();
        let (d, n) = x.dim();
        let mut out = x;
        for col in 0..n {
            let norm: f64 = out.column(col).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_COLUMN_EPS {
                for i in 0..d {
                    out[[i, col]] = if i == 0 { 1.0 } else { 0.0 };
                }
            } else {
                for i in 0..d {
                    out[[i, col]] /= norm;
                }
            }
        }
        self.push(out.into_dyn(), Op::ColNormalize(a))
    }

    pub fn concat_chan(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        let v = ndarray::concatenate(Axis(2), &[av, bv]).expect("concat shapes");
        self.push(v.into_dyn(), Op::ConcatChan(a, b))
    }

    pub fn slice_chan(&mut self, input: NodeId, from: usize, to: usize) -> NodeId {
        let v = as3(&self.nodes[input.0].value)
            .slice(ndarray::s![.., .., from..to])
            .to_owned();
        self.push(v.into_dyn(), Op::SliceChan { input, from, to })
    }

    /// Same-element-count reshape (row-major order preserved).
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.iter().map(|v| v * v).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumSq(a))
    }

    pub fn sum_abs(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.iter().map(|v| v.abs()).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAbs(a))
    }

    pub fn weighted_combine(&mut self, dict: NodeId, k: NodeId) -> NodeId {
        let dv = as3(&self.nodes[dict.0].value).to_owned();
        let kv = as2(&self.nodes[k.0].value).to_owned();
        let v = weighted_combine_raw(&dv, &kv).into_dyn();
        self.push(v, Op::WeightedCombine { dict, k })
    }

    pub fn conv_bank_sum(&mut self, bank: NodeId, codes: NodeId) -> NodeId {
        let bv = as3(&self.nodes[bank.0].value).to_owned();
        let cv = as3(&self.nodes[codes.0].value).to_owned();
        let v = conv_bank_sum_raw(&bv, &cv).into_dyn();
        self.push(v, Op::ConvBankSum { bank, codes })
    }

    pub fn conv_transpose_bank(&mut self, bank: NodeId, resid: NodeId) -> NodeId {
        let bv = as3(&self.nodes[bank.0].value).to_owned();
        let rv = as2(&self.nodes[resid.0].value).to_owned();
        let v = conv_transpose_bank_raw(&bv, &rv).into_dyn();
        self.push(v, Op::ConvTransposeBank { bank, resid })
    }

    pub fn grad_k(&mut self, dict: NodeId, codes: NodeId, resid: NodeId) -> NodeId {
        let dv = as3(&self.nodes[dict.0].value).to_owned();
        let cv = as3(&self.nodes[codes.0].value).to_owned();
        let rv = as2(&self.nodes[resid.0].value).to_owned();
        let v = grad_k_raw(&dv, &cv, &rv).into_dyn();
        self.push(v, Op::GradK { dict, codes, resid })
    }

    // -- reverse pass -------------------------------------------------------

    /// Exact gradients of the 0-d `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[b.0].value);
                acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                acc(grads, *a, g * sv);
                let ds: f64 = g
                    .iter()
                    .zip(self.nodes[a.0].value.iter())
                    .map(|(gv, av)| gv * av)
                    .sum();
                acc(grads, *s, ArrayD::from_elem(IxDyn(&[]), ds));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::Softplus(a) => {
                let d = self.nodes[a.0].value.mapv(sigmoid);
                acc(grads, *a, g * &d);
            }
            Op::MatMul(a, b) => {
                let gv = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::AddColBias(a, bias) => {
                acc(grads, *a, g.clone());
                let gv = as2(g);
                acc(grads, *bias, gv.sum_axis(Axis(1)).into_dyn());
            }
            Op::AddChanBias(a, bias) => {
                acc(grads, *a, g.clone());
                let gv = as3(g);
                let c = gv.dim().2;
                let mut db = Array1::zeros(c);
                for ch in 0..c {
                    db[ch] = gv.index_axis(Axis(2), ch).sum();
                }
                acc(grads, *bias, db.into_dyn());
            }
            Op::Conv2d { input, kernel } => {
                let gv = as3(g).to_owned();
                let kv = as4(&self.nodes[kernel.0].value).to_owned();
                let iv = as3(&self.nodes[input.0].value).to_owned();
                acc(grads, *input, conv2d_transpose(&gv, &kv).into_dyn());
                let (kh, kw, _, _) = kv.dim();
                acc(
                    grads,
                    *kernel,
                    conv2d_kernel_grad(&iv, &gv, kh, kw).into_dyn(),
                );
            }
            Op::ConvTranspose2d { input, kernel } => {
                let gv = as3(g).to_owned();
                let kv = as4(&self.nodes[kernel.0].value).to_owned();
                let iv = as3(&self.nodes[input.0].value).to_owned();
                acc(grads, *input, conv2d(&gv, &kv).into_dyn());
                let (kh, kw, _, _) = kv.dim();
                acc(
                    grads,
                    *kernel,
                    conv2d_kernel_grad(&gv, &iv, kh, kw).into_dyn(),
                );
            }
            Op::NormTrain {
                input,
                gamma,
                beta,
                mean,
                var,
            } => {
                let gv = as3(g);
                let x = as3(&self.nodes[input.0].value);
                let gam = as1(&self.nodes[gamma.0].value);
                let (h, w, c) = x.dim();
                let n = (h * w) as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    let m = mean[ch];
                    // Accumulate the channel sums needed by the closed form.
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for y in 0..h {
                        for xx in 0..w {
                            let gval = gv[[y, xx, ch]];
                            let xhat = (x[[y, xx, ch]] - m) * inv;
                            sum_g += gval;
                            sum_g_xhat += gval * xhat;
                        }
                    }
                    dgamma[ch] = sum_g_xhat;
                    dbeta[ch] = sum_g;
                    let gc = gam[ch];
                    for y in 0..h {
                        for xx in 0..w {
                            let gval = gv[[y, xx, ch]];
                            let xhat = (x[[y, xx, ch]] - m) * inv;
                            dx[[y, xx, ch]] =
                                gc * inv * (gval - sum_g / n - xhat * sum_g_xhat / n);
                        }
                    }
                }
                acc(grads, *input, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::NormEval {
                input,
                gamma,
                beta,
                mean,
                var,
            } => {
                let gv = as3(g);
                let x = as3(&self.nodes[input.0].value);
                let gam = as1(&self.nodes[gamma.0].value);
                let (h, w, c) = x.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    let m = mean[ch];
                    let gc = gam[ch];
                    for y in 0..h {
                        for xx in 0..w {
                            let gval = gv[[y, xx, ch]];
                            dx[[y, xx, ch]] = gval * gc * inv;
                            dgamma[ch] += gval * (x[[y, xx, ch]] - m) * inv;
                            dbeta[ch] += gval;
                        }
                    }
                }
                acc(grads, *input, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::ColNormalize(a) => {
                let gv = as2(g);
                let x = as2(&self.nodes[a.0].value);
                let (d, n) = x.dim();
                let mut dx = Array2::zeros((d, n));
                for col in 0..n {
                    let norm: f64 = x.column(col).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < DEGENERATE_COLUMN_EPS {
                        continue; // constant substitution, no gradient
                    }
                    let y: Vec<f64> = x.column(col).iter().map(|v| v / norm).collect();
                    let ydotg: f64 = y
                        .iter()
                        .zip(gv.column(col).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in 0..d {
                        dx[[i, col]] = (gv[[i, col]] - y[i] * ydotg) / norm;
                    }
                }
                acc(grads, *a, dx.into_dyn());
            }
            Op::ConcatChan(a, b) => {
                let gv = as3(g);
                let ca = as3(&self.nodes[a.0].value).dim().2;
                acc(
                    grads,
                    *a,
                    gv.slice(ndarray::s![.., .., ..ca]).to_owned().into_dyn(),
                );
                acc(
                    grads,
                    *b,
                    gv.slice(ndarray::s![.., .., ca..]).to_owned().into_dyn(),
                );
            }
            Op::SliceChan { input, from, to } => {
                let gv = as3(g);
                let (h, w, c) = as3(&self.nodes[input.0].value).dim();
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                dx.slice_mut(ndarray::s![.., .., *from..*to]).assign(&gv);
                acc(grads, *input, dx.into_dyn());
            }
            Op::Reshape(a) => {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(self.nodes[a.0].value.raw_dim())
                    .expect("reshape gradient");
                acc(grads, *a, back);
            }
            Op::SumSq(a) => {
                let g0 = g.first().copied().unwrap_or(0.0);
                acc(grads, *a, self.nodes[a.0].value.mapv(|v| 2.0 * v * g0));
            }
            Op::SumAbs(a) => {
                let g0 = g.first().copied().unwrap_or(0.0);
                acc(
                    grads,
                    *a,
                    self.nodes[a.0].value.mapv(|v| v.signum() * g0),
                );
            }
            Op::WeightedCombine { dict, k } => {
                let gv = as3(g).to_owned();
                let dv = as3(&self.nodes[dict.0].value);
                let kv = as2(&self.nodes[k.0].value).to_owned();
                // d_dict[:,:,i] = Σ_n g[:,:,n] · k[i,n]
                acc(
                    grads,
                    *dict,
                    weighted_combine_raw(&gv, &kv.t().to_owned()).into_dyn(),
                );
                let (d, n) = kv.dim();
                let mut dk = Array2::zeros((d, n));
                for i in 0..d {
                    let di = dv.index_axis(Axis(2), i);
                    for col in 0..n {
                        dk[[i, col]] = di
                            .iter()
                            .zip(gv.index_axis(Axis(2), col).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
                acc(grads, *k, dk.into_dyn());
            }
            Op::ConvBankSum { bank, codes } => {
                let gv = as2(g).to_owned();
                let bv = as3(&self.nodes[bank.0].value).to_owned();
                let cv = as3(&self.nodes[codes.0].value);
                let p = bv.dim().0;
                let n = bv.dim().2;
                let mut dbank = ndarray::Array3::<f64>::zeros((p, p, n));
                for ch in 0..n {
                    let channel = cv.index_axis(Axis(2), ch).to_owned();
                    dbank
                        .index_axis_mut(Axis(2), ch)
                        .assign(&kernel_grad(&channel, &gv, p));
                }
                acc(grads, *bank, dbank.into_dyn());
                acc(grads, *codes, conv_transpose_bank_raw(&bv, &gv).into_dyn());
            }
            Op::ConvTransposeBank { bank, resid } => {
                let gv = as3(g).to_owned();
                let bv = as3(&self.nodes[bank.0].value).to_owned();
                let rv = as2(&self.nodes[resid.0].value).to_owned();
                let p = bv.dim().0;
                let n = bv.dim().2;
                let mut dbank = ndarray::Array3::<f64>::zeros((p, p, n));
                for ch in 0..n {
                    let g_ch = gv.index_axis(Axis(2), ch).to_owned();
                    dbank
                        .index_axis_mut(Axis(2), ch)
                        .assign(&kernel_grad(&g_ch, &rv, p));
                }
                acc(grads, *bank, dbank.into_dyn());
                acc(grads, *resid, conv_bank_sum_raw(&bv, &gv).into_dyn());
            }
            Op::GradK { dict, codes, resid } => {
                let gv = as2(g).to_owned(); // (d, n)
                let dv = as3(&self.nodes[dict.0].value).to_owned();
                let cv = as3(&self.nodes[codes.0].value).to_owned();
                let rv = as2(&self.nodes[resid.0].value).to_owned();
                let mixed = weighted_combine_raw(&dv, &gv); // (p, p, n)
                acc(
                    grads,
                    *resid,
                    (conv_bank_sum_raw(&mixed, &cv) * 2.0).into_dyn(),
                );
                acc(
                    grads,
                    *codes,
                    (conv_transpose_bank_raw(&mixed, &rv) * 2.0).into_dyn(),
                );
                let p = dv.dim().0;
                let n = cv.dim().2;
                let mut kgrads = ndarray::Array3::<f64>::zeros((p, p, n));
                for ch in 0..n {
                    let channel = cv.index_axis(Axis(2), ch).to_owned();
                    kgrads
                        .index_axis_mut(Axis(2), ch)
                        .assign(&kernel_grad(&channel, &rv, p));
                }
                // d_dict[:,:,i] = 2 Σ_n g[i,n] kgrad_n
                acc(
                    grads,
                    *dict,
                    (weighted_combine_raw(&kgrads, &gv.t().to_owned()) * 2.0).into_dyn(),
                );
            }
        }
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zero-filled when the node does not influence
    /// the root.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.value(id).raw_dim()),
        }
    }
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("1-d node")
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d node")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3-d node")
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("4-d node")
}
