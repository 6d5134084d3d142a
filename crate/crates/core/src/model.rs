//! The weighted convolutional dictionary (WCD) forward model and the
//! analytic gradients and half-steps shared by the classical solver and
//! the unrolled network.
//!
//! The artifact layer of a metal-corrupted image is modelled as
//! `A = (D ∗ K) ⊗ M`: per-sample filters mixed from a shared dictionary
//! `D` by a weighting matrix `K` whose columns live on the unit sphere,
//! convolved with spatial coefficient maps `M`. The data term is the
//! masked fit `g = ‖I ⊙ (Y − X − A)‖²_F`; its gradients are written as
//! `2 · adjoint · residual` so they match central finite differences of
//! `g` exactly (the factor is non-observable downstream because every
//! step size is configurable or learned).

use ndarray::{Array2, Array3};

use crate::error::{MarError, Result};
use crate::tensor::{
    conv_bank_sum, conv_transpose_bank, kernel_grad, weighted_combine, FilterBank, Plane, Stack3,
};

/// Unit-norm tolerance for the constraint set `Ω = {K : ‖K_n‖₂ = 1}`.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Spatial coefficient maps `M`, one `H × W` channel per active filter.
pub type CodeTensor = Stack3;

/// The shared artifact dictionary `D`: a `p × p × d` filter stack.
#[derive(Debug, Clone)]
pub struct Dictionary {
    bank: FilterBank,
}

impl Dictionary {
    pub const DEFAULT_FILTER_SIZE: usize = 9;
    pub const DEFAULT_FILTER_COUNT: usize = 32;

    pub fn new(bank: FilterBank) -> Self {
        Dictionary { bank }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        Ok(Dictionary {
            bank: FilterBank::new(data)?,
        })
    }

    /// Zero-mean Gaussian filters, each slice scaled to unit Frobenius norm.
    pub fn random(p: usize, d: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        let mut data = Array3::from_shape_fn((p, p, d), |_| rng.normal());
        for i in 0..d {
            let norm = data
                .index_axis(ndarray::Axis(2), i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            data.index_axis_mut(ndarray::Axis(2), i)
                .mapv_inplace(|v| v / norm);
        }
        Dictionary::from_array(data)
    }

    pub fn filter_size(&self) -> usize {
        self.bank.size()
    }

    pub fn filter_count(&self) -> usize {
        self.bank.count()
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }
}

/// Per-sample mixing coefficients `K` (`d × N`). In the constrained state
/// every column has unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    values: Array2<f64>,
}

impl WeightMatrix {
    pub const DEFAULT_ACTIVE_FILTERS: usize = 6;

    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MarError::NonFinite("WeightMatrix::new".into()));
        }
        Ok(WeightMatrix { values })
    }

    /// Uniform unit-norm columns: every entry `1/√d`.
    pub fn uniform(d: usize, n: usize) -> Self {
        WeightMatrix {
            values: Array2::from_elem((d, n), 1.0 / (d as f64).sqrt()),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn dict_size(&self) -> usize {
        self.values.dim().0
    }

    pub fn active_filters(&self) -> usize {
        self.values.dim().1
    }

    /// Whether every column is on the unit sphere within [`UNIT_NORM_TOL`].
    pub fn is_constrained(&self) -> bool {
        (0..self.active_filters()).all(|n| {
            let norm = self.column_norm(n);
            (norm - 1.0).abs() <= UNIT_NORM_TOL
        })
    }

    pub fn column_norm(&self, n: usize) -> f64 {
        self.values.column(n).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An observed scene: corrupted image `Y`, binary non-metal mask `I`,
/// optional ground truth and LI-restored image.
#[derive(Debug, Clone)]
pub struct MaskedScene {
    pub y: Plane,
    /// Non-metal mask: 1 outside metal, 0 on metal.
    pub mask: Plane,
    pub x_gt: Option<Plane>,
    pub x_li: Option<Plane>,
}

impl MaskedScene {
    pub fn new(y: Plane, mask: Plane, x_gt: Option<Plane>, x_li: Option<Plane>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MarError::NonFinite("MaskedScene: Y".into()));
        }
        for ((r, c), &v) in mask.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(MarError::NonBinaryMask { value: v, row: r, col: c });
            }
        }
        let dim = y.dim();
        for (name, plane) in [("I", Some(&mask)), ("X_gt", x_gt.as_ref()), ("X_li", x_li.as_ref())]
        {
            if let Some(p) = plane {
                if p.dim() != dim {
                    return Err(MarError::DimensionMismatch {
                        context: "MaskedScene::new",
                        expected: format!("{dim:?}"),
                        got: format!("{name} is {:?}", p.dim()),
                    });
                }
            }
        }
        Ok(MaskedScene { y, mask, x_gt, x_li })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.y.dim()
    }
}

/// Proximal-gradient step sizes `η₁, η₂, η₃` for the K, M and X updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl StepSizes {
    pub fn new(eta1: f64, eta2: f64, eta3: f64) -> Result<Self> {
        if eta1 <= 0.0 || eta2 <= 0.0 || eta3 <= 0.0 {
            return Err(MarError::InvalidConfig(format!(
                "step sizes must be positive, got ({eta1}, {eta2}, {eta3})"
            )));
        }
        Ok(StepSizes { eta1, eta2, eta3 })
    }

    pub fn scaled(&self, factor: f64) -> StepSizes {
        StepSizes {
            eta1: self.eta1 * factor,
            eta2: self.eta2 * factor,
            eta3: self.eta3 * factor,
        }
    }
}

/// `A = (D ∗ K) ⊗ M`.
pub fn synthesize_artifact(
    dict: &Dictionary,
    k: &WeightMatrix,
    m: &CodeTensor,
) -> Result<Plane> {
    let bank = weighted_combine(dict.bank(), k.values())?;
    conv_bank_sum(&bank, m)
}

/// Masked data residual `R = I ⊙ (A + X − Y)`; identically zero on metal.
pub fn masked_residual(scene: &MaskedScene, x: &Plane, a: &Plane) -> Plane {
    let mut r = a + x - &scene.y;
    r *= &scene.mask;
    r
}

/// Gradient of `g₁(K) = ‖I ⊙ (Y − X − (D∗K)⊗M)‖²_F` given the masked
/// residual: `grad[i, n] = 2 ⟨conv_same(D_i, M_n), R⟩`.
///
/// Evaluated by contracting the dictionary against the per-channel filter
/// adjoints (`kernel_grad`), which is algebraically identical to the
/// depth-wise-convolution-then-unfold route and much cheaper.
pub fn grad_k(dict: &Dictionary, m: &CodeTensor, r: &Plane) -> Array2<f64> {
    grad_k_raw(dict.bank().data(), m, r)
}

/// [`grad_k`] on raw arrays (shared with the reverse-mode engine).
pub fn grad_k_raw(dict: &Array3<f64>, m: &CodeTensor, r: &Plane) -> Array2<f64> {
    let (p, _, d) = dict.dim();
    let n = m.dim().2;
    let mut out = Array2::zeros((d, n));
    for col in 0..n {
        let channel = m.index_axis(ndarray::Axis(2), col).to_owned();
        let kg = kernel_grad(&channel, r, p);
        for i in 0..d {
            let dot: f64 = dict
                .index_axis(ndarray::Axis(2), i)
                .iter()
                .zip(kg.iter())
                .map(|(a, b)| a * b)
                .sum();
            out[[i, col]] = 2.0 * dot;
        }
    }
    out
}

/// Gradient of `g₂(M)` given the masked residual:
/// `2 · (D∗K) ⊗ᵀ R`.
pub fn grad_m(dict: &Dictionary, k: &WeightMatrix, r: &Plane) -> Result<CodeTensor> {
    let bank = weighted_combine(dict.bank(), k.values())?;
    let mut g = conv_transpose_bank(&bank, r);
    g *= 2.0;
    Ok(g)
}

/// Plain gradient step on `K`; the output is unconstrained (normalization
/// happens in the prox).
pub fn half_step_k(k: &WeightMatrix, grad: &Array2<f64>, eta1: f64) -> Array2<f64> {
    k.values() - &(grad * eta1)
}

/// Plain gradient step on `M`.
pub fn half_step_m(m: &CodeTensor, grad: &CodeTensor, eta2: f64) -> CodeTensor {
    m - &(grad * eta2)
}

/// `X^{t+½} = (1 − η₃ I) ⊙ X + η₃ I ⊙ (Y − A)`: metal pixels keep `X`,
/// non-metal pixels blend toward `Y − A`.
pub fn half_step_x(scene: &MaskedScene, x: &Plane, a: &Plane, eta3: f64) -> Plane {
    let mut out = x.clone();
    ndarray::Zip::from(&mut out)
        .and(&scene.mask)
        .and(&scene.y)
        .and(a)
        .for_each(|o, &i, &y, &av| {
            *o = (1.0 - eta3 * i) * *o + eta3 * i * (y - av);
        });
    out
}

/// Squared Frobenius norm of the masked residual (the data term of the
/// objective).
pub fn fidelity(scene: &MaskedScene, x: &Plane, a: &Plane) -> f64 {
    let r = masked_residual(scene, x, a);
    r.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::conv_same;
    use ndarray::{Array2, Array3};

    fn random_scene(rng: &mut Rng, h: usize, w: usize) -> MaskedScene {
        let y = Array2::from_shape_fn((h, w), |_| rng.range(-1.0, 1.0));
        let mask = Array2::from_shape_fn((h, w), |_| if rng.uniform() < 0.85 { 1.0 } else { 0.0 });
        MaskedScene::new(y, mask, None, None).unwrap()
    }

    fn random_dict(rng: &mut Rng, p: usize, d: usize) -> Dictionary {
        Dictionary::from_array(Array3::from_shape_fn((p, p, d), |_| rng.range(-1.0, 1.0)))
            .unwrap()
    }

    fn random_weights(rng: &mut Rng, d: usize, n: usize) -> WeightMatrix {
        WeightMatrix::new(Array2::from_shape_fn((d, n), |_| rng.range(-1.0, 1.0))).unwrap()
    }

    fn random_codes(rng: &mut Rng, h: usize, w: usize, n: usize) -> CodeTensor {
        Array3::from_shape_fn((h, w, n), |_| rng.range(-1.0, 1.0))
    }

    #[test]
    fn masked_scene_rejects_non_binary_mask() {
        let y = Array2::zeros((3, 3));
        let mut mask = Array2::zeros((3, 3));
        mask[[1, 1]] = 0.5;
        assert!(matches!(
            MaskedScene::new(y, mask, None, None),
            Err(MarError::NonBinaryMask { .. })
        ));
    }

    #[test]
    fn synthesize_zero_codes_gives_zero_artifact() {
        let mut rng = Rng::new(1);
        let dict = random_dict(&mut rng, 3, 4);
        let k = random_weights(&mut rng, 4, 2);
        let a = synthesize_artifact(&dict, &k, &Array3::zeros((6, 6, 2))).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_one_hot_selects_single_conv() {
        let mut rng = Rng::new(2);
        let dict = random_dict(&mut rng, 3, 4);
        let mut kv = Array2::zeros((4, 1));
        kv[[2, 0]] = 1.0;
        let k = WeightMatrix::new(kv).unwrap();
        let m = random_codes(&mut rng, 6, 6, 1);
        let a = synthesize_artifact(&dict, &k, &m).unwrap();
        let want = conv_same(
            dict.bank().slice(2),
            &m.index_axis(ndarray::Axis(2), 0).to_owned(),
        );
        assert_eq!(a, want);
    }

    #[test]
    fn synthesize_matches_expanded_sum_oracle() {
        let mut rng = Rng::new(3);
        let dict = random_dict(&mut rng, 3, 4);
        let k = random_weights(&mut rng, 4, 2);
        let m = random_codes(&mut rng, 6, 6, 2);
        let a = synthesize_artifact(&dict, &k, &m).unwrap();
        // Oracle: sum over n of conv(sum_i D_i K[i,n], M_n), filters built
        // entry by entry.
        let mut want: Plane = Array2::zeros((6, 6));
        for n in 0..2 {
            let mut filt: Plane = Array2::zeros((3, 3));
            for i in 0..4 {
                filt = filt + &dict.bank().slice(i).to_owned() * k.values()[[i, n]];
            }
            want = want
                + conv_same(filt.view(), &m.index_axis(ndarray::Axis(2), n).to_owned());
        }
        for (x, y) in a.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_zero_when_decomposition_exact() {
        let mut rng = Rng::new(4);
        let scene_x = Array2::from_shape_fn((5, 5), |_| rng.range(0.0, 1.0));
        let a = Array2::from_shape_fn((5, 5), |_| rng.range(-0.2, 0.2));
        let y = &scene_x + &a;
        let scene = MaskedScene::new(y, Array2::ones((5, 5)), None, None).unwrap();
        let r = masked_residual(&scene, &scene_x, &a);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn residual_zero_under_full_mask() {
        let mut rng = Rng::new(5);
        let scene = MaskedScene::new(
            Array2::from_shape_fn((4, 4), |_| rng.range(-1.0, 1.0)),
            Array2::zeros((4, 4)),
            None,
            None,
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 4), |_| rng.range(-1.0, 1.0));
        let a = Array2::from_shape_fn((4, 4), |_| rng.range(-1.0, 1.0));
        assert!(masked_residual(&scene, &x, &a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_recovers_masked_perturbation() {
        let mut rng = Rng::new(6);
        let x = Array2::from_shape_fn((5, 5), |_| rng.range(0.0, 1.0));
        let a = Array2::from_shape_fn((5, 5), |_| rng.range(-0.3, 0.3));
        let mask =
            Array2::from_shape_fn((5, 5), |_| if rng.uniform() < 0.7 { 1.0 } else { 0.0 });
        let eps = Array2::from_shape_fn((5, 5), |_| rng.range(-0.1, 0.1)) * &mask;
        let y = &x + &a + &eps;
        let scene = MaskedScene::new(y, mask.clone(), None, None).unwrap();
        let r = masked_residual(&scene, &x, &a);
        for (rv, ev) in r.iter().zip(eps.iter()) {
            assert!((rv + ev).abs() < 1e-12); // R = I*(A+X-Y) = -eps
        }
    }

    /// g1 as a function of K, for finite differences.
    fn g1(scene: &MaskedScene, x: &Plane, dict: &Dictionary, k: &Array2<f64>, m: &CodeTensor) -> f64 {
        let a = synthesize_artifact(dict, &WeightMatrix::new(k.clone()).unwrap(), m).unwrap();
        fidelity(scene, x, &a)
    }

    #[test]
    fn grad_k_zero_residual_gives_zero() {
        let mut rng = Rng::new(7);
        let dict = random_dict(&mut rng, 3, 4);
        let m = random_codes(&mut rng, 6, 6, 2);
        let g = grad_k(&dict, &m, &Array2::zeros((6, 6)));
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_k_zero_codes_gives_zero() {
        let mut rng = Rng::new(8);
        let dict = random_dict(&mut rng, 3, 4);
        let r = Array2::from_shape_fn((6, 6), |_| rng.range(-1.0, 1.0));
        let g = grad_k(&dict, &Array3::zeros((6, 6, 2)), &r);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_k_matches_finite_differences() {
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 10, 10);
            let x = Array2::from_shape_fn((10, 10), |_| rng.range(0.0, 1.0));
            let dict = random_dict(&mut rng, 3, 4);
            let k = random_weights(&mut rng, 4, 2);
            let m = random_codes(&mut rng, 10, 10, 2);

            let a = synthesize_artifact(&dict, &k, &m).unwrap();
            let r = masked_residual(&scene, &x, &a);
            let g = grad_k(&dict, &m, &r);

            let h = 1e-6;
            for i in 0..4 {
                for n in 0..2 {
                    let mut kp = k.values().clone();
                    let mut km = k.values().clone();
                    kp[[i, n]] += h;
                    km[[i, n]] -= h;
                    let fd = (g1(&scene, &x, &dict, &kp, &m) - g1(&scene, &x, &dict, &km, &m))
                        / (2.0 * h);
                    let denom = fd.abs().max(g[[i, n]].abs()).max(1e-8);
                    assert!(
                        (fd - g[[i, n]]).abs() / denom < 1e-6,
                        "grad_k FD mismatch at ({i},{n}): analytic {} vs fd {fd}",
                        g[[i, n]]
                    );
                }
            }
        }
    }

    /// g2 as a function of M.
    fn g2(scene: &MaskedScene, x: &Plane, dict: &Dictionary, k: &WeightMatrix, m: &CodeTensor) -> f64 {
        let a = synthesize_artifact(dict, k, m).unwrap();
        fidelity(scene, x, &a)
    }

    #[test]
    fn grad_m_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let scene = random_scene(&mut rng, 8, 8);
        let x = Array2::from_shape_fn((8, 8), |_| rng.range(0.0, 1.0));
        let dict = random_dict(&mut rng, 3, 3);
        let k = random_weights(&mut rng, 3, 2);
        let m = random_codes(&mut rng, 8, 8, 2);

        let a = synthesize_artifact(&dict, &k, &m).unwrap();
        let r = masked_residual(&scene, &x, &a);
        let g = grad_m(&dict, &k, &r).unwrap();

        let h = 1e-6;
        let mut rng2 = Rng::new(11);
        for _ in 0..30 {
            let (y, xx, n) = (rng2.index(8), rng2.index(8), rng2.index(2));
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp[[y, xx, n]] += h;
            mm[[y, xx, n]] -= h;
            let fd = (g2(&scene, &x, &dict, &k, &mp) - g2(&scene, &x, &dict, &k, &mm)) / (2.0 * h);
            let denom = fd.abs().max(g[[y, xx, n]].abs()).max(1e-8);
            assert!(
                (fd - g[[y, xx, n]]).abs() / denom < 1e-6,
                "grad_m FD mismatch at ({y},{xx},{n})"
            );
        }
    }

    #[test]
    fn grad_m_delta_filters_give_twice_residual() {
        // With (D*K) reduced to delta filters the transpose copies R into
        // every channel; the squared-norm convention doubles it.
        let mut rng = Rng::new(12);
        let mut dict_data = Array3::zeros((3, 3, 2));
        dict_data[[1, 1, 0]] = 1.0;
        dict_data[[1, 1, 1]] = 1.0;
        let dict = Dictionary::from_array(dict_data).unwrap();
        let mut kv = Array2::zeros((2, 2));
        kv[[0, 0]] = 1.0;
        kv[[1, 1]] = 1.0;
        let k = WeightMatrix::new(kv).unwrap();
        let r = Array2::from_shape_fn((5, 5), |_| rng.range(-1.0, 1.0));
        let g = grad_m(&dict, &k, &r).unwrap();
        for n in 0..2 {
            for ((y, x), rv) in r.indexed_iter() {
                assert!((g[[y, x, n]] - 2.0 * rv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_steps_are_plain_gradient_steps() {
        let mut rng = Rng::new(13);
        let k = random_weights(&mut rng, 4, 2);
        let gk = Array2::from_shape_fn((4, 2), |_| rng.range(-1.0, 1.0));
        assert_eq!(half_step_k(&k, &gk, 0.0), *k.values());
        assert_eq!(half_step_k(&k, &Array2::zeros((4, 2)), 0.7), *k.values());
        let zero_k = WeightMatrix::new(Array2::zeros((4, 2))).unwrap();
        let stepped = half_step_k(&zero_k, &gk, 1.0);
        for (s, g) in stepped.iter().zip(gk.iter()) {
            assert_eq!(*s, -g);
        }

        let m = random_codes(&mut rng, 5, 5, 2);
        let gm = random_codes(&mut rng, 5, 5, 2);
        assert_eq!(half_step_m(&m, &gm, 0.0), m);
        assert_eq!(half_step_m(&m, &Array3::zeros((5, 5, 2)), 0.4), m);
        let eta = 0.3;
        let stepped = half_step_m(&m, &gm, eta);
        for ((s, m0), g) in stepped.iter().zip(m.iter()).zip(gm.iter()) {
            assert!((s - (m0 - eta * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn half_step_x_full_step_reaches_target() {
        let mut rng = Rng::new(14);
        let y = Array2::from_shape_fn((4, 4), |_| rng.range(0.0, 1.0));
        let a = Array2::from_shape_fn((4, 4), |_| rng.range(-0.2, 0.2));
        let scene = MaskedScene::new(y.clone(), Array2::ones((4, 4)), None, None).unwrap();
        let x = Array2::from_shape_fn((4, 4), |_| rng.range(0.0, 1.0));
        let out = half_step_x(&scene, &x, &a, 1.0);
        for ((o, yv), av) in out.iter().zip(y.iter()).zip(a.iter()) {
            assert!((o - (yv - av)).abs() < 1e-15);
        }
    }

    #[test]
    fn half_step_x_frozen_on_metal() {
        let mut rng = Rng::new(15);
        let scene = MaskedScene::new(
            Array2::from_shape_fn((4, 4), |_| rng.range(0.0, 1.0)),
            Array2::zeros((4, 4)),
            None,
            None,
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 4), |_| rng.range(0.0, 1.0));
        let a = Array2::from_shape_fn((4, 4), |_| rng.range(-0.2, 0.2));
        assert_eq!(half_step_x(&scene, &x, &a, 0.8), x);
    }

    #[test]
    fn half_step_x_single_pixel_arithmetic() {
        let scene = MaskedScene::new(
            Array2::from_elem((1, 1), 1.0),
            Array2::ones((1, 1)),
            None,
            None,
        )
        .unwrap();
        let x = Array2::from_elem((1, 1), 0.4);
        let a = Array2::from_elem((1, 1), 0.2);
        let out = half_step_x(&scene, &x, &a, 0.5);
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn fidelity_direct_summation_oracle() {
        let mut rng = Rng::new(16);
        let scene = random_scene(&mut rng, 6, 6);
        let x = Array2::from_shape_fn((6, 6), |_| rng.range(0.0, 1.0));
        let a = Array2::from_shape_fn((6, 6), |_| rng.range(-0.3, 0.3));
        let f = fidelity(&scene, &x, &a);
        let mut want = 0.0;
        for ((r, c), &i) in scene.mask.indexed_iter() {
            let v = i * (a[[r, c]] + x[[r, c]] - scene.y[[r, c]]);
            want += v * v;
        }
        assert!((f - want).abs() < 1e-12);
        assert!(f >= 0.0);
    }

    #[test]
    fn scale_ambiguity_of_synthesis() {
        // K_n -> cK_n with M_n -> M_n/c leaves the artifact unchanged.
        let mut rng = Rng::new(17);
        let dict = random_dict(&mut rng, 3, 4);
        let k = random_weights(&mut rng, 4, 2);
        let m = random_codes(&mut rng, 6, 6, 2);
        let c = 2.7;
        let k_scaled = WeightMatrix::new(k.values() * c).unwrap();
        let m_scaled = &m / c;
        let a1 = synthesize_artifact(&dict, &k, &m).unwrap();
        let a2 = synthesize_artifact(&dict, &k_scaled, &m_scaled).unwrap();
        for (x, y) in a1.iter().zip(a2.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
