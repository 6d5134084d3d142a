//! Layer parameters and their tape forwards: dense maps, channel
//! convolutions, per-channel normalization with running statistics,
//! residual blocks, and the two proximal-network shapes (the column-wise
//! K prox and the 3-resblock tensor prox).
//!
//! Forward functions address their tensors through the name binding in
//! [`ForwardCtx`]; a parameter the binding does not know is a hard error,
//! so a tensor that was never registered cannot silently stay untrained.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayD};

use crate::net::tape::{NodeId, Tape, NORM_EPS};
use crate::rng::Rng;
use crate::tensor::Stack3;

/// Momentum of the running-statistics update in the normalization layers.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected map applied per column.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseParams {
    pub fn fan_in_uniform(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        DenseParams {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.range(-bound, bound)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseParams {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }
}

/// Channel convolution kernel plus bias; kernel layout `(kh, kw, cin, cout)`.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    pub fn fan_in_uniform(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((kh * kw * cin) as f64).sqrt();
        ConvParams {
            kernel: Array4::from_shape_fn((kh, kw, cin, cout), |_| rng.range(-bound, bound)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        ConvParams {
            kernel: Array4::zeros((kh, kw, cin, cout)),
            bias: Array1::zeros(cout),
        }
    }
}

/// Per-channel scale/shift with running mean/variance.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub stats_recorded: bool,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            stats_recorded: false,
        }
    }

    /// Zero gain: the layer outputs β (= 0) regardless of input, so a
    /// residual branch behind it starts exactly at the identity and
    /// departs continuously as the gain grows.
    pub fn zero_gain(channels: usize) -> Self {
        NormParams {
            gamma: Array1::zeros(channels),
            ..NormParams::identity(channels)
        }
    }

    /// Folds one batch of statistics into the running averages.
    pub fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>) {
        if !self.stats_recorded {
            self.running_mean.assign(mean);
            self.running_var.assign(var);
            self.stats_recorded = true;
        } else {
            self.running_mean = &self.running_mean * (1.0 - NORM_MOMENTUM) + mean * NORM_MOMENTUM;
            self.running_var = &self.running_var * (1.0 - NORM_MOMENTUM) + var * NORM_MOMENTUM;
        }
    }
}

/// Conv + Norm + ReLU + Conv + Norm + skip connection.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub conv1: ConvParams,
    pub bn1: NormParams,
    pub conv2: ConvParams,
    pub bn2: NormParams,
}

impl ResBlockParams {
    /// Both convs fan-in initialized; the closing normalization starts
    /// with zero gain so the whole block is the identity at
    /// initialization. Gating on the norm gain rather than zeroing the
    /// second conv keeps the departure from the identity continuous: a
    /// normalization behind a near-zero conv would rescale its output to
    /// full variance no matter how small the kernel is.
    pub fn identity_init(channels: usize, rng: &mut Rng) -> Self {
        ResBlockParams {
            conv1: ConvParams::fan_in_uniform(3, 3, channels, channels, rng),
            bn1: NormParams::identity(channels),
            conv2: ConvParams::fan_in_uniform(3, 3, channels, channels, rng),
            bn2: NormParams::zero_gain(channels),
        }
    }
}

/// The K prox: Linear + ReLU + Linear + skip + column normalization.
#[derive(Debug, Clone)]
pub struct ProxNetKParams {
    pub dense1: DenseParams,
    pub dense2: DenseParams,
}

impl ProxNetKParams {
    pub fn identity_init(width: usize, rng: &mut Rng) -> Self {
        ProxNetKParams {
            dense1: DenseParams::fan_in_uniform(width, width, rng),
            dense2: DenseParams::zeros(width, width),
        }
    }
}

/// The tensor prox: exactly three residual blocks.
#[derive(Debug, Clone)]
pub struct ProxNetTensorParams {
    pub blocks: [ResBlockParams; 3],
}

impl ProxNetTensorParams {
    pub fn identity_init(channels: usize, rng: &mut Rng) -> Self {
        ProxNetTensorParams {
            blocks: [
                ResBlockParams::identity_init(channels, rng),
                ResBlockParams::identity_init(channels, rng),
                ResBlockParams::identity_init(channels, rng),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].bn1.gamma.len()
    }
}

/// One normalization layer's freshly computed statistics, keyed by layer
/// path so the trainer can fold them into the running averages after the
/// batch (keeping scene forwards read-only and parallelizable).
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub path: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// A forward pass under construction: the tape, the name → leaf binding,
/// the mode, and the side records (norm statistics, eval fallbacks).
pub struct ForwardCtx {
    pub tape: Tape,
    pub mode: Mode,
    binding: HashMap<String, NodeId>,
    pub stat_updates: Vec<StatUpdate>,
    /// Set when an eval-mode normalization ran before any statistics were
    /// recorded and fell back to scale-1/shift-0 normalization.
    pub norm_fallback: bool,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            tape: Tape::new(),
            mode,
            binding: HashMap::new(),
            stat_updates: Vec::new(),
            norm_fallback: false,
        }
    }

    /// Registers a named parameter leaf. Double registration is a bug.
    pub fn bind(&mut self, name: String, value: ArrayD<f64>) -> NodeId {
        let id = self.tape.leaf(value);
        let previous = self.binding.insert(name.clone(), id);
        assert!(previous.is_none(), "parameter bound twice: {name}");
        id
    }

    /// Looks a parameter up by path; an unknown name means the tensor was
    /// never registered and aborts loudly.
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .binding
            .get(name)
            .unwrap_or_else(|| panic!("parameter not registered: {name}"))
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.binding.keys()
    }
}

// ---------------------------------------------------------------------------
// Tape forwards
// ---------------------------------------------------------------------------

pub fn dense_forward(ctx: &mut ForwardCtx, path: &str, input: NodeId) -> NodeId {
    let w = ctx.id(&format!("{path}.weight"));
    let b = ctx.id(&format!("{path}.bias"));
    let mm = ctx.tape.matmul(w, input);
    ctx.tape.add_col_bias(mm, b)
}

pub fn conv_forward(ctx: &mut ForwardCtx, path: &str, input: NodeId) -> NodeId {
    let k = ctx.id(&format!("{path}.kernel"));
    let b = ctx.id(&format!("{path}.bias"));
    let c = ctx.tape.conv2d(input, k);
    ctx.tape.add_chan_bias(c, b)
}

pub fn norm_forward(ctx: &mut ForwardCtx, path: &str, input: NodeId, norm: &NormParams) -> NodeId {
    let gamma = ctx.id(&format!("{path}.gamma"));
    let beta = ctx.id(&format!("{path}.beta"));
    match ctx.mode {
        Mode::Train => {
            let (id, mean, var) = ctx.tape.norm_train(input, gamma, beta);
            ctx.stat_updates.push(StatUpdate {
                path: path.to_string(),
                mean,
                var,
            });
            id
        }
        Mode::Eval => {
            if norm.stats_recorded {
                ctx.tape.norm_eval(
                    input,
                    gamma,
                    beta,
                    norm.running_mean.clone(),
                    norm.running_var.clone(),
                )
            } else {
                ctx.norm_fallback = true;
                let c = norm.gamma.len();
                // mean 0, variance 1 − ε: the normalization itself becomes
                // exactly scale 1, shift 0.
                ctx.tape.norm_eval(
                    input,
                    gamma,
                    beta,
                    Array1::zeros(c),
                    Array1::from_elem(c, 1.0 - NORM_EPS),
                )
            }
        }
    }
}

pub fn resblock_forward(
    ctx: &mut ForwardCtx,
    path: &str,
    input: NodeId,
    rb: &ResBlockParams,
) -> NodeId {
    let c1 = conv_forward(ctx, &format!("{path}.conv1"), input);
    let n1 = norm_forward(ctx, &format!("{path}.bn1"), c1, &rb.bn1);
    let r = ctx.tape.relu(n1);
    let c2 = conv_forward(ctx, &format!("{path}.conv2"), r);
    let n2 = norm_forward(ctx, &format!("{path}.bn2"), c2, &rb.bn2);
    ctx.tape.add(input, n2)
}

pub fn proxnet_tensor_forward(
    ctx: &mut ForwardCtx,
    path: &str,
    input: NodeId,
    params: &ProxNetTensorParams,
) -> NodeId {
    let mut x = input;
    for (i, block) in params.blocks.iter().enumerate() {
        x = resblock_forward(ctx, &format!("{path}.block{i}"), x, block);
    }
    x
}

/// `normalize(column + dense2(relu(dense1(column))))` per column; ends in
/// the same unit-sphere projection as the classical prox.
pub fn proxnet_k_forward(ctx: &mut ForwardCtx, path: &str, k_half: NodeId) -> NodeId {
    let d1 = dense_forward(ctx, &format!("{path}.dense1"), k_half);
    let r = ctx.tape.relu(d1);
    let d2 = dense_forward(ctx, &format!("{path}.dense2"), r);
    let skip = ctx.tape.add(k_half, d2);
    ctx.tape.col_normalize(skip)
}

// ---------------------------------------------------------------------------
// Standalone application (single prox evaluations outside a full
// network forward)
// ---------------------------------------------------------------------------

/// Binds one tensor prox and runs it on a bare tensor. Train mode folds
/// the fresh statistics into the running averages immediately. Returns
/// the output and whether an eval fallback occurred.
pub fn proxnet_tensor_apply(
    params: &mut ProxNetTensorParams,
    input: &Stack3,
    mode: Mode,
) -> (Stack3, bool) {
    let mut ctx = ForwardCtx::new(mode);
    bind_proxnet_tensor(&mut ctx, "prox", params);
    let x = ctx.tape.leaf(input.clone().into_dyn());
    let out = proxnet_tensor_forward(&mut ctx, "prox", x, params);
    let value = ctx
        .tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("tensor prox output");
    let updates = std::mem::take(&mut ctx.stat_updates);
    apply_stat_updates_proxnet(params, "prox", &updates);
    (value, ctx.norm_fallback)
}

/// Binds one K prox and runs it on a bare half-step matrix.
pub fn proxnet_k_apply(params: &ProxNetKParams, k_half: &Array2<f64>) -> Array2<f64> {
    let mut ctx = ForwardCtx::new(Mode::Eval);
    bind_proxnet_k(&mut ctx, "prox", params);
    let x = ctx.tape.leaf(k_half.clone().into_dyn());
    let out = proxnet_k_forward(&mut ctx, "prox", x);
    ctx.tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("k prox output")
}

pub fn bind_dense(ctx: &mut ForwardCtx, path: &str, p: &DenseParams) {
    ctx.bind(format!("{path}.weight"), p.weight.clone().into_dyn());
    ctx.bind(format!("{path}.bias"), p.bias.clone().into_dyn());
}

pub fn bind_conv(ctx: &mut ForwardCtx, path: &str, p: &ConvParams) {
    ctx.bind(format!("{path}.kernel"), p.kernel.clone().into_dyn());
    ctx.bind(format!("{path}.bias"), p.bias.clone().into_dyn());
}

pub fn bind_norm(ctx: &mut ForwardCtx, path: &str, p: &NormParams) {
    ctx.bind(format!("{path}.gamma"), p.gamma.clone().into_dyn());
    ctx.bind(format!("{path}.beta"), p.beta.clone().into_dyn());
}

pub fn bind_resblock(ctx: &mut ForwardCtx, path: &str, p: &ResBlockParams) {
    bind_conv(ctx, &format!("{path}.conv1"), &p.conv1);
    bind_norm(ctx, &format!("{path}.bn1"), &p.bn1);
    bind_conv(ctx, &format!("{path}.conv2"), &p.conv2);
    bind_norm(ctx, &format!("{path}.bn2"), &p.bn2);
}

pub fn bind_proxnet_tensor(ctx: &mut ForwardCtx, path: &str, p: &ProxNetTensorParams) {
    for (i, block) in p.blocks.iter().enumerate() {
        bind_resblock(ctx, &format!("{path}.block{i}"), block);
    }
}

pub fn bind_proxnet_k(ctx: &mut ForwardCtx, path: &str, p: &ProxNetKParams) {
    bind_dense(ctx, &format!("{path}.dense1"), &p.dense1);
    bind_dense(ctx, &format!("{path}.dense2"), &p.dense2);
}

/// Folds collected statistics back into a standalone tensor prox.
fn apply_stat_updates_proxnet(params: &mut ProxNetTensorParams, path: &str, updates: &[StatUpdate]) {
    for update in updates {
        for (i, block) in params.blocks.iter_mut().enumerate() {
            if update.path == format!("{path}.block{i}.bn1") {
                block.bn1.update_running(&update.mean, &update.var);
            } else if update.path == format!("{path}.block{i}.bn2") {
                block.bn2.update_running(&update.mean, &update.var);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::prox_k;
    use ndarray::Array3;

    fn rand_stack(rng: &mut Rng, h: usize, w: usize, c: usize) -> Stack3 {
        Array3::from_shape_fn((h, w, c), |_| rng.range(-1.0, 1.0))
    }

    #[test]
    fn identity_initialized_tensor_prox_is_identity() {
        let mut rng = Rng::new(1);
        let mut params = ProxNetTensorParams::identity_init(3, &mut rng);
        let input = rand_stack(&mut rng, 5, 5, 3);
        let (out, fallback) = proxnet_tensor_apply(&mut params, &input, Mode::Train);
        assert!(!fallback);
        for (a, b) in out.iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_prox_preserves_shape() {
        let mut rng = Rng::new(2);
        let mut params = ProxNetTensorParams::identity_init(4, &mut rng);
        // Perturb so it is not the identity.
        params.blocks[0].conv2.kernel[[1, 1, 0, 0]] = 0.3;
        let input = rand_stack(&mut rng, 6, 7, 4);
        let (out, _) = proxnet_tensor_apply(&mut params, &input, Mode::Train);
        assert_eq!(out.dim(), (6, 7, 4));
    }

    #[test]
    fn eval_before_stats_falls_back_with_flag() {
        let mut rng = Rng::new(3);
        let mut params = ProxNetTensorParams::identity_init(2, &mut rng);
        let input = rand_stack(&mut rng, 4, 4, 2);
        let (out, fallback) = proxnet_tensor_apply(&mut params, &input, Mode::Eval);
        assert!(fallback);
        // Identity blocks + identity normalization: output equals input.
        for (a, b) in out.iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_records_then_eval_uses_running_stats() {
        let mut rng = Rng::new(4);
        let mut params = ProxNetTensorParams::identity_init(2, &mut rng);
        params.blocks[0].conv2.kernel[[0, 0, 0, 1]] = 0.5;
        let input = rand_stack(&mut rng, 4, 4, 2);
        let (_, _) = proxnet_tensor_apply(&mut params, &input, Mode::Train);
        assert!(params.blocks[0].bn1.stats_recorded);
        let (_, fallback) = proxnet_tensor_apply(&mut params, &input, Mode::Eval);
        assert!(!fallback);
    }

    #[test]
    fn zero_inner_k_prox_reduces_to_column_normalization() {
        let mut rng = Rng::new(5);
        let params = ProxNetKParams::identity_init(4, &mut rng);
        let k_half = Array2::from_shape_fn((4, 3), |_| rng.range(-1.0, 1.0));
        let out = proxnet_k_apply(&params, &k_half);
        let (want, _) = prox_k(&k_half);
        for (a, b) in out.iter().zip(want.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k_prox_output_columns_unit_norm() {
        let mut rng = Rng::new(6);
        let mut params = ProxNetKParams::identity_init(5, &mut rng);
        params.dense2 = DenseParams::fan_in_uniform(5, 5, &mut rng);
        let k_half = Array2::from_shape_fn((5, 2), |_| rng.range(-1.0, 1.0));
        let out = proxnet_k_apply(&params, &k_half);
        for col in 0..2 {
            let norm: f64 = out.column(col).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    /// Finite-difference check of a scalar loss through the K prox.
    #[test]
    fn k_prox_backprop_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let mut params = ProxNetKParams::identity_init(4, &mut rng);
        params.dense2 = DenseParams::fan_in_uniform(4, 4, &mut rng);
        let k_half = Array2::from_shape_fn((4, 2), |_| rng.range(-1.0, 1.0));

        // Weight the output before squaring: the plain squared norm of
        // unit-norm columns is constant and has no gradient.
        let probe = Array2::from_shape_fn((4, 2), |_| rng.range(-1.0, 1.0));
        let run = |p: &ProxNetKParams, k: &Array2<f64>| -> (f64, ForwardCtx, crate::net::tape::NodeId) {
            let mut ctx = ForwardCtx::new(Mode::Eval);
            bind_proxnet_k(&mut ctx, "prox", p);
            let x = ctx.tape.leaf(k.clone().into_dyn());
            let out = proxnet_k_forward(&mut ctx, "prox", x);
            let w = ctx.tape.leaf(probe.clone().into_dyn());
            let weighted = ctx.tape.mul(out, w);
            let loss = ctx.tape.sum_sq(weighted);
            let v = ctx.tape.scalar_value(loss);
            (v, ctx, loss)
        };

        let (_, ctx, loss) = run(&params, &k_half);
        let grads = ctx.tape.backward(loss);
        let h = 1e-6;
        // Probe several weights of dense1 and dense2.
        for (name, field) in [("prox.dense1.weight", 0), ("prox.dense2.weight", 1)] {
            let id = ctx.id(name);
            let g = grads.get_or_zeros(&ctx.tape, id);
            for idx in [0usize, 5, 10] {
                let eval = |delta: f64| {
                    let mut p2 = params.clone();
                    let target = if field == 0 {
                        &mut p2.dense1.weight
                    } else {
                        &mut p2.dense2.weight
                    };
                    target.as_slice_mut().unwrap()[idx] += delta;
                    run(&p2, &k_half).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{name}[{idx}]: fd {fd} vs {an}"
                );
            }
        }
    }

    /// Finite-difference check of a scalar loss through the tensor prox
    /// on a 4x4x2 input (train-mode statistics included).
    #[test]
    fn tensor_prox_backprop_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let mut params = ProxNetTensorParams::identity_init(2, &mut rng);
        for block in &mut params.blocks {
            block.bn2.gamma = Array1::from_shape_fn(2, |_| rng.range(0.3, 1.0));
            block.bn2.beta = Array1::from_shape_fn(2, |_| rng.range(-0.2, 0.2));
        }
        let input = rand_stack(&mut rng, 4, 4, 2);

        let run = |p: &ProxNetTensorParams| -> (f64, ForwardCtx, crate::net::tape::NodeId) {
            let mut ctx = ForwardCtx::new(Mode::Train);
            bind_proxnet_tensor(&mut ctx, "prox", p);
            let x = ctx.tape.leaf(input.clone().into_dyn());
            let out = proxnet_tensor_forward(&mut ctx, "prox", x, p);
            let loss = ctx.tape.sum_sq(out);
            let v = ctx.tape.scalar_value(loss);
            (v, ctx, loss)
        };

        let (_, ctx, loss) = run(&params);
        let grads = ctx.tape.backward(loss);
        let h = 1e-5;
        for (name, bi) in [("prox.block0.conv1.kernel", 0usize), ("prox.block1.bn1.gamma", 1)] {
            let id = ctx.id(name);
            let g = grads.get_or_zeros(&ctx.tape, id);
            let len = g.len();
            for idx in [0usize, len / 2, len - 1] {
                let eval = |delta: f64| {
                    let mut p2 = params.clone();
                    match bi {
                        0 => p2.blocks[0].conv1.kernel.as_slice_mut().unwrap()[idx] += delta,
                        _ => p2.blocks[1].bn1.gamma.as_slice_mut().unwrap()[idx] += delta,
                    }
                    run(&p2).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{name}[{idx}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn running_stats_update_uses_momentum() {
        let mut norm = NormParams::identity(2);
        let m1 = Array1::from_vec(vec![1.0, 2.0]);
        let v1 = Array1::from_vec(vec![0.5, 0.25]);
        norm.update_running(&m1, &v1);
        // First batch primes the averages directly.
        assert_eq!(norm.running_mean, m1);
        let m2 = Array1::from_vec(vec![3.0, 4.0]);
        let v2 = Array1::from_vec(vec![1.0, 1.0]);
        norm.update_running(&m2, &v2);
        assert!((norm.running_mean[0] - (0.9 * 1.0 + 0.1 * 3.0)).abs() < 1e-12);
        assert!((norm.running_var[1] - (0.9 * 0.25 + 0.1 * 1.0)).abs() < 1e-12);
    }
}
