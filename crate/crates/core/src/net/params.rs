//! All trainable state of the unrolled network, with a single name-based
//! visitor that the forward binding, the optimizer, the checkpoint format
//! and the parameter count all share. One visitor means a tensor cannot
//! be trainable in one place and forgotten in another.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{MarError, Result};
use crate::net::layers::{
    ConvParams, DenseParams, ForwardCtx, NormParams, ProxNetKParams, ProxNetTensorParams,
    ResBlockParams,
};
use crate::net::tape::softplus_inverse;
use crate::rng::Rng;

/// Initial value of every learned step size (before the softplus
/// reparameterization that keeps them positive).
pub const ETA_INIT: f64 = 0.5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetHyper {
    /// Dictionary filter size `p` (odd).
    pub filter_size: usize,
    /// Dictionary size `d`.
    pub dict_filters: usize,
    /// Active filters `N` (columns of the weighting matrix).
    pub active_filters: usize,
    /// Channel-expansion width `N_p` carried alongside X.
    pub expand_channels: usize,
    /// Stage count `T`.
    pub stages: usize,
}

impl NetHyper {
    /// Full-scale defaults: p = 9, d = 32, N = 6, N_p = 32, T = 10.
    pub fn paper() -> Self {
        NetHyper {
            filter_size: 9,
            dict_filters: 32,
            active_filters: 6,
            expand_channels: 32,
            stages: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_size % 2 == 0 {
            return Err(MarError::EvenFilterSize(self.filter_size));
        }
        if self.stages == 0 {
            return Err(MarError::InvalidConfig("stage count must be >= 1".into()));
        }
        if self.active_filters > self.dict_filters {
            return Err(MarError::InvalidConfig(format!(
                "active_filters ({}) must not exceed dict_filters ({}); the warm start selects the first N of d channels",
                self.active_filters, self.dict_filters
            )));
        }
        if self.active_filters == 0 || self.dict_filters == 0 || self.expand_channels == 0 {
            return Err(MarError::InvalidConfig("channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One unrolled stage: the three proximal nets and the stage's step sizes
/// (stored raw; the forward applies softplus).
#[derive(Debug, Clone)]
pub struct StageParams {
    pub theta_k: ProxNetKParams,
    pub theta_m: ProxNetTensorParams,
    pub theta_x: ProxNetTensorParams,
    pub eta1_raw: f64,
    pub eta2_raw: f64,
    pub eta3_raw: f64,
}

/// The warm-start block: channel expansion, the initial X prox, the
/// simplified-model (no weighting) M prox and refinement X prox, the
/// K-net used to produce the first weighting matrix, and the warm-start
/// step sizes.
#[derive(Debug, Clone)]
pub struct InitParams {
    pub expand: ConvParams,
    pub prox_x: ProxNetTensorParams,
    pub prox_m: ProxNetTensorParams,
    pub prox_x_refine: ProxNetTensorParams,
    pub prox_k: ProxNetKParams,
    pub eta1_raw: f64,
    pub eta2_raw: f64,
    pub eta3_raw: f64,
}

/// Everything the network learns.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub hyper: NetHyper,
    /// The shared dictionary `D`: `(p, p, d)`.
    pub dict: Array3<f64>,
    pub init: InitParams,
    pub stages: Vec<StageParams>,
}

impl NetworkParams {
    /// Seeded initialization: Gaussian dictionary slices scaled to unit
    /// Frobenius norm, fan-in first layers, zeroed final layers (every
    /// prox starts as the identity), and η = softplus(raw) = 0.5.
    pub fn seeded(hyper: NetHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = Rng::new(seed);
        let p = hyper.filter_size;
        let d = hyper.dict_filters;
        let n = hyper.active_filters;
        let xc = 1 + hyper.expand_channels;

        let mut dict = Array3::from_shape_fn((p, p, d), |_| rng.normal());
        for i in 0..d {
            let norm = dict
                .index_axis(ndarray::Axis(2), i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            dict.index_axis_mut(ndarray::Axis(2), i)
                .mapv_inplace(|v| v / norm);
        }

        let eta_raw = softplus_inverse(ETA_INIT);
        let init = InitParams {
            expand: ConvParams::fan_in_uniform(3, 3, 1, hyper.expand_channels, &mut rng),
            prox_x: ProxNetTensorParams::identity_init(xc, &mut rng),
            prox_m: ProxNetTensorParams::identity_init(d, &mut rng),
            prox_x_refine: ProxNetTensorParams::identity_init(xc, &mut rng),
            prox_k: ProxNetKParams::identity_init(d, &mut rng),
            eta1_raw: eta_raw,
            eta2_raw: eta_raw,
            eta3_raw: eta_raw,
        };
        let stages = (0..hyper.stages)
            .map(|_| StageParams {
                theta_k: ProxNetKParams::identity_init(d, &mut rng),
                theta_m: ProxNetTensorParams::identity_init(n, &mut rng),
                theta_x: ProxNetTensorParams::identity_init(xc, &mut rng),
                eta1_raw: eta_raw,
                eta2_raw: eta_raw,
                eta3_raw: eta_raw,
            })
            .collect();

        Ok(NetworkParams {
            hyper,
            dict,
            init,
            stages,
        })
    }

    /// Visits every trainable tensor as `(name, flattened copy)`, in a
    /// fixed deterministic order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
        f("dict", self.dict.clone().into_dyn());
        visit_conv("init.expand", &self.init.expand, f);
        visit_proxnet_tensor("init.prox_x", &self.init.prox_x, f);
        visit_proxnet_tensor("init.prox_m", &self.init.prox_m, f);
        visit_proxnet_tensor("init.prox_x_refine", &self.init.prox_x_refine, f);
        visit_proxnet_k("init.prox_k", &self.init.prox_k, f);
        f("init.eta1_raw", scalar(self.init.eta1_raw));
        f("init.eta2_raw", scalar(self.init.eta2_raw));
        f("init.eta3_raw", scalar(self.init.eta3_raw));
        for (t, stage) in self.stages.iter().enumerate() {
            let base = format!("stages.{t}");
            visit_proxnet_k(&format!("{base}.theta_k"), &stage.theta_k, f);
            visit_proxnet_tensor(&format!("{base}.theta_m"), &stage.theta_m, f);
            visit_proxnet_tensor(&format!("{base}.theta_x"), &stage.theta_x, f);
            f(&format!("{base}.eta1_raw"), scalar(stage.eta1_raw));
            f(&format!("{base}.eta2_raw"), scalar(stage.eta2_raw));
            f(&format!("{base}.eta3_raw"), scalar(stage.eta3_raw));
        }
    }

    /// Mutable counterpart of [`visit`]: the callback receives each
    /// tensor's current value and returns its replacement.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
        fn put3(target: &mut Array3<f64>, name: &str, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
            let updated = f(name, target.clone().into_dyn());
            *target = updated
                .into_dimensionality()
                .unwrap_or_else(|_| panic!("shape mismatch updating {name}"));
        }
        put3(&mut self.dict, "dict", f);
        visit_conv_mut("init.expand", &mut self.init.expand, f);
        visit_proxnet_tensor_mut("init.prox_x", &mut self.init.prox_x, f);
        visit_proxnet_tensor_mut("init.prox_m", &mut self.init.prox_m, f);
        visit_proxnet_tensor_mut("init.prox_x_refine", &mut self.init.prox_x_refine, f);
        visit_proxnet_k_mut("init.prox_k", &mut self.init.prox_k, f);
        self.init.eta1_raw = scalar_back(f("init.eta1_raw", scalar(self.init.eta1_raw)));
        self.init.eta2_raw = scalar_back(f("init.eta2_raw", scalar(self.init.eta2_raw)));
        self.init.eta3_raw = scalar_back(f("init.eta3_raw", scalar(self.init.eta3_raw)));
        for (t, stage) in self.stages.iter_mut().enumerate() {
            let base = format!("stages.{t}");
            visit_proxnet_k_mut(&format!("{base}.theta_k"), &mut stage.theta_k, f);
            visit_proxnet_tensor_mut(&format!("{base}.theta_m"), &mut stage.theta_m, f);
            visit_proxnet_tensor_mut(&format!("{base}.theta_x"), &mut stage.theta_x, f);
            stage.eta1_raw = scalar_back(f(&format!("{base}.eta1_raw"), scalar(stage.eta1_raw)));
            stage.eta2_raw = scalar_back(f(&format!("{base}.eta2_raw"), scalar(stage.eta2_raw)));
            stage.eta3_raw = scalar_back(f(&format!("{base}.eta3_raw"), scalar(stage.eta3_raw)));
        }
    }

    /// Visits the non-trainable buffers (running statistics and their
    /// recorded flags).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
        self.for_each_norm(&mut |path, norm| {
            f(&format!("{path}.running_mean"), norm.running_mean.clone().into_dyn());
            f(&format!("{path}.running_var"), norm.running_var.clone().into_dyn());
            f(
                &format!("{path}.recorded"),
                scalar(if norm.stats_recorded { 1.0 } else { 0.0 }),
            );
        });
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
        self.for_each_norm_mut(&mut |path, norm| {
            let mean = f(
                &format!("{path}.running_mean"),
                norm.running_mean.clone().into_dyn(),
            );
            norm.running_mean = mean.into_dimensionality().expect("running_mean shape");
            let var = f(
                &format!("{path}.running_var"),
                norm.running_var.clone().into_dyn(),
            );
            norm.running_var = var.into_dimensionality().expect("running_var shape");
            let rec = scalar_back(f(
                &format!("{path}.recorded"),
                scalar(if norm.stats_recorded { 1.0 } else { 0.0 }),
            ));
            norm.stats_recorded = rec != 0.0;
        });
    }

    /// Every normalization layer with its path prefix.
    pub fn for_each_norm(&self, f: &mut dyn FnMut(&str, &NormParams)) {
        let mut walk = |path: String, p: &ProxNetTensorParams| {
            for (i, block) in p.blocks.iter().enumerate() {
                f(&format!("{path}.block{i}.bn1"), &block.bn1);
                f(&format!("{path}.block{i}.bn2"), &block.bn2);
            }
        };
        walk("init.prox_x".into(), &self.init.prox_x);
        walk("init.prox_m".into(), &self.init.prox_m);
        walk("init.prox_x_refine".into(), &self.init.prox_x_refine);
        for (t, stage) in self.stages.iter().enumerate() {
            walk(format!("stages.{t}.theta_m"), &stage.theta_m);
            walk(format!("stages.{t}.theta_x"), &stage.theta_x);
        }
    }

    pub fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&str, &mut NormParams)) {
        fn walk(
            path: String,
            p: &mut ProxNetTensorParams,
            f: &mut dyn FnMut(&str, &mut NormParams),
        ) {
            for (i, block) in p.blocks.iter_mut().enumerate() {
                f(&format!("{path}.block{i}.bn1"), &mut block.bn1);
                f(&format!("{path}.block{i}.bn2"), &mut block.bn2);
            }
        }
        walk("init.prox_x".into(), &mut self.init.prox_x, f);
        walk("init.prox_m".into(), &mut self.init.prox_m, f);
        walk(
            "init.prox_x_refine".into(),
            &mut self.init.prox_x_refine,
            f,
        );
        for (t, stage) in self.stages.iter_mut().enumerate() {
            walk(format!("stages.{t}.theta_m"), &mut stage.theta_m, f);
            walk(format!("stages.{t}.theta_x"), &mut stage.theta_x, f);
        }
    }

    /// Overrides the initial step sizes everywhere (warm start and all
    /// stages). The defaults start at 0.5; desk-scale training from
    /// scratch is more stable starting smaller because the identity-
    /// initialized stages have no learned damping yet.
    pub fn set_initial_etas(&mut self, eta1: f64, eta2: f64, eta3: f64) {
        let raw = |v: f64| softplus_inverse(v);
        self.init.eta1_raw = raw(eta1);
        self.init.eta2_raw = raw(eta2);
        self.init.eta3_raw = raw(eta3);
        for stage in &mut self.stages {
            stage.eta1_raw = raw(eta1);
            stage.eta2_raw = raw(eta2);
            stage.eta3_raw = raw(eta3);
        }
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, tensor| count += tensor.len());
        count
    }

    /// Parameter names in visitor order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Registers every trainable tensor as a tape leaf.
    pub fn bind(&self, ctx: &mut ForwardCtx) {
        self.visit(&mut |name, tensor| {
            ctx.bind(name.to_string(), tensor);
        });
    }

    /// Applies collected normalization statistics (in order) to the
    /// running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[crate::net::layers::StatUpdate]) {
        use std::collections::HashMap;
        let mut by_path: HashMap<&str, Vec<&crate::net::layers::StatUpdate>> = HashMap::new();
        for u in updates {
            by_path.entry(u.path.as_str()).or_default().push(u);
        }
        self.for_each_norm_mut(&mut |path, norm| {
            if let Some(list) = by_path.get(path) {
                for u in list {
                    norm.update_running(&u.mean, &u.var);
                }
            }
        });
    }
}

fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn scalar_back(a: ArrayD<f64>) -> f64 {
    *a.view()
        .into_dimensionality::<ndarray::Ix0>()
        .expect("scalar tensor")
        .into_scalar()
}

fn visit_dense(path: &str, p: &DenseParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    f(&format!("{path}.weight"), p.weight.clone().into_dyn());
    f(&format!("{path}.bias"), p.bias.clone().into_dyn());
}

fn visit_dense_mut(path: &str, p: &mut DenseParams, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
    p.weight = f(&format!("{path}.weight"), p.weight.clone().into_dyn())
        .into_dimensionality()
        .expect("dense weight shape");
    p.bias = f(&format!("{path}.bias"), p.bias.clone().into_dyn())
        .into_dimensionality()
        .expect("dense bias shape");
}

fn visit_conv(path: &str, p: &ConvParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    f(&format!("{path}.kernel"), p.kernel.clone().into_dyn());
    f(&format!("{path}.bias"), p.bias.clone().into_dyn());
}

fn visit_conv_mut(path: &str, p: &mut ConvParams, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
    p.kernel = f(&format!("{path}.kernel"), p.kernel.clone().into_dyn())
        .into_dimensionality()
        .expect("conv kernel shape");
    p.bias = f(&format!("{path}.bias"), p.bias.clone().into_dyn())
        .into_dimensionality()
        .expect("conv bias shape");
}

fn visit_norm(path: &str, p: &NormParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    f(&format!("{path}.gamma"), p.gamma.clone().into_dyn());
    f(&format!("{path}.beta"), p.beta.clone().into_dyn());
}

fn visit_norm_mut(path: &str, p: &mut NormParams, f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>) {
    p.gamma = f(&format!("{path}.gamma"), p.gamma.clone().into_dyn())
        .into_dimensionality()
        .expect("gamma shape");
    p.beta = f(&format!("{path}.beta"), p.beta.clone().into_dyn())
        .into_dimensionality()
        .expect("beta shape");
}

fn visit_resblock(path: &str, p: &ResBlockParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    visit_conv(&format!("{path}.conv1"), &p.conv1, f);
    visit_norm(&format!("{path}.bn1"), &p.bn1, f);
    visit_conv(&format!("{path}.conv2"), &p.conv2, f);
    visit_norm(&format!("{path}.bn2"), &p.bn2, f);
}

fn visit_resblock_mut(
    path: &str,
    p: &mut ResBlockParams,
    f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>,
) {
    visit_conv_mut(&format!("{path}.conv1"), &mut p.conv1, f);
    visit_norm_mut(&format!("{path}.bn1"), &mut p.bn1, f);
    visit_conv_mut(&format!("{path}.conv2"), &mut p.conv2, f);
    visit_norm_mut(&format!("{path}.bn2"), &mut p.bn2, f);
}

fn visit_proxnet_tensor(path: &str, p: &ProxNetTensorParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    for (i, block) in p.blocks.iter().enumerate() {
        visit_resblock(&format!("{path}.block{i}"), block, f);
    }
}

fn visit_proxnet_tensor_mut(
    path: &str,
    p: &mut ProxNetTensorParams,
    f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>,
) {
    for (i, block) in p.blocks.iter_mut().enumerate() {
        visit_resblock_mut(&format!("{path}.block{i}"), block, f);
    }
}

fn visit_proxnet_k(path: &str, p: &ProxNetKParams, f: &mut dyn FnMut(&str, ArrayD<f64>)) {
    visit_dense(&format!("{path}.dense1"), &p.dense1, f);
    visit_dense(&format!("{path}.dense2"), &p.dense2, f);
}

fn visit_proxnet_k_mut(
    path: &str,
    p: &mut ProxNetKParams,
    f: &mut dyn FnMut(&str, ArrayD<f64>) -> ArrayD<f64>,
) {
    visit_dense_mut(&format!("{path}.dense1"), &mut p.dense1, f);
    visit_dense_mut(&format!("{path}.dense2"), &mut p.dense2, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_hyper() -> NetHyper {
        NetHyper {
            filter_size: 3,
            dict_filters: 4,
            active_filters: 2,
            expand_channels: 3,
            stages: 2,
        }
    }

    /// Closed-form parameter count for cross-checking the visitor.
    fn analytic_count(h: NetHyper) -> usize {
        let p = h.filter_size;
        let d = h.dict_filters;
        let n = h.active_filters;
        let xc = 1 + h.expand_channels;
        let dense_pair = 2 * (d * d + d);
        let resblock = |c: usize| 2 * (3 * 3 * c * c + c) + 2 * (2 * c);
        let prox_tensor = |c: usize| 3 * resblock(c);
        let dict = p * p * d;
        let init = (3 * 3 * h.expand_channels + h.expand_channels)
            + prox_tensor(xc) * 2
            + prox_tensor(d)
            + dense_pair
            + 3;
        let stage = dense_pair + prox_tensor(n) + prox_tensor(xc) + 3;
        dict + init + h.stages * stage
    }

    #[test]
    fn param_count_matches_closed_form() {
        let hyper = tiny_hyper();
        let params = NetworkParams::seeded(hyper, 1).unwrap();
        assert_eq!(params.param_count(), analytic_count(hyper));
    }

    #[test]
    fn default_config_count_is_reported() {
        let params = NetworkParams::seeded(NetHyper::paper(), 0).unwrap();
        let count = params.param_count();
        assert_eq!(count, analytic_count(NetHyper::paper()));
        // Informational: the reference implementation reports 1,602,809
        // trainable parameters at this nominal configuration; kernel
        // widths inside the proximal blocks are an architectural choice,
        // so the exact figure is reported rather than asserted.
        println!("default parameter count: {count} (reference 1,602,809)");
    }

    #[test]
    fn adding_one_stage_adds_constant_increment() {
        let mut hyper = tiny_hyper();
        let base = NetworkParams::seeded(hyper, 1).unwrap().param_count();
        hyper.stages = 3;
        let plus1 = NetworkParams::seeded(hyper, 1).unwrap().param_count();
        hyper.stages = 4;
        let plus2 = NetworkParams::seeded(hyper, 1).unwrap().param_count();
        assert_eq!(plus1 - base, plus2 - plus1);
    }

    #[test]
    fn visit_and_visit_mut_agree_on_names() {
        let params = NetworkParams::seeded(tiny_hyper(), 2).unwrap();
        let names = params.param_names();
        let mut names_mut = Vec::new();
        let mut clone = params.clone();
        clone.visit_mut(&mut |name, t| {
            names_mut.push(name.to_string());
            t
        });
        assert_eq!(names, names_mut);
        // Names are unique.
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn visit_mut_roundtrip_preserves_values() {
        let params = NetworkParams::seeded(tiny_hyper(), 3).unwrap();
        let mut clone = params.clone();
        clone.visit_mut(&mut |_, t| t);
        let mut before = Vec::new();
        params.visit(&mut |_, t| before.push(t));
        let mut after = Vec::new();
        clone.visit(&mut |_, t| after.push(t));
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn hyper_validation_rejects_bad_configs() {
        let mut h = tiny_hyper();
        h.filter_size = 4;
        assert!(h.validate().is_err());
        let mut h = tiny_hyper();
        h.active_filters = 10;
        assert!(h.validate().is_err());
        let mut h = tiny_hyper();
        h.stages = 0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn dictionary_slices_unit_frobenius_at_init() {
        let params = NetworkParams::seeded(tiny_hyper(), 4).unwrap();
        for i in 0..4 {
            let norm: f64 = params
                .dict
                .index_axis(ndarray::Axis(2), i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn buffers_round_trip() {
        let mut params = NetworkParams::seeded(tiny_hyper(), 5).unwrap();
        params.stages[0].theta_m.blocks[0].bn1.stats_recorded = true;
        params.stages[0].theta_m.blocks[0].bn1.running_mean[0] = 7.5;
        let mut stash = std::collections::HashMap::new();
        params.visit_buffers(&mut |name, t| {
            stash.insert(name.to_string(), t);
        });
        let mut fresh = NetworkParams::seeded(tiny_hyper(), 6).unwrap();
        fresh.visit_buffers_mut(&mut |name, _| stash[name].clone());
        assert!(fresh.stages[0].theta_m.blocks[0].bn1.stats_recorded);
        assert_eq!(fresh.stages[0].theta_m.blocks[0].bn1.running_mean[0], 7.5);
    }
}
