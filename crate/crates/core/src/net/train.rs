//! Desk-scale trainer: Adam with gradient clipping, a halving learning
//! rate schedule, flip/crop augmentation, and a deterministic batch loop.
//!
//! Batch members are evaluated in parallel on independent tapes; their
//! gradients and normalization statistics are reduced in index order, so
//! a fixed seed reproduces training bit for bit regardless of thread
//! scheduling.

use ndarray::ArrayD;
use rayon::prelude::*;

use crate::error::{MarError, Result};
use crate::metrics::masked_psnr;
use crate::model::MaskedScene;
use crate::net::forward::{reconstruct, scene_loss_and_grads, LossWeights};
use crate::net::layers::StatUpdate;
use crate::net::params::NetworkParams;
use crate::rng::Rng;
use crate::tensor::Plane;

/// Training configuration. Full-scale defaults follow the published
/// recipe (batch 32, 64² patches, 2e-4 learning rate halved at epoch
/// milestones, flip augmentation); toy runs shrink everything.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs after which the learning rate is halved.
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    pub flip_augment: bool,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Linear learning-rate warmup over this many optimizer steps; guards
    /// the identity-initialized unrolled stack against the sign-step
    /// behaviour of Adam's first updates.
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            patch_size: 64,
            learning_rate: 2e-4,
            epochs: 300,
            lr_milestones: vec![50, 100, 150, 200],
            seed: 0,
            flip_augment: true,
            clip_norm: 10.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MarError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(MarError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(MarError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(MarError::InvalidConfig("clip_norm must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// Adam moments for every trainable tensor, aligned with visitor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(ArrayD::zeros(t.raw_dim())));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// One Adam update from already-clipped mean gradients.
    fn apply(&mut self, params: &mut NetworkParams, grads: &[ArrayD<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let mut idx = 0;
        params.visit_mut(&mut |_, mut tensor| {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            });
            ndarray::Zip::from(&mut tensor)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                });
            idx += 1;
            tensor
        });
    }
}

/// One row of the training log CSV: epoch, step, loss, val_psnr, lr.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    /// Mean validation PSNR; present on epoch-boundary rows.
    pub val_psnr: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path).map_err(|e| MarError::io(path, e))?;
        writeln!(file, "epoch,step,loss,val_psnr,lr").map_err(|e| MarError::io(path, e))?;
        for row in &self.rows {
            let val = row
                .val_psnr
                .map(|v| format!("{v}"))
                .unwrap_or_default();
            writeln!(file, "{},{},{},{},{}", row.epoch, row.step, row.loss, val, row.lr)
                .map_err(|e| MarError::io(path, e))?;
        }
        Ok(())
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| !r.loss.is_nan()).map(|r| r.loss)
    }
}

/// Deterministic crop + flip of a training scene.
fn augment(scene: &MaskedScene, patch: usize, flip: bool, rng: &mut Rng) -> Result<MaskedScene> {
    let (h, w) = scene.dims();
    if patch > h || patch > w {
        return Err(MarError::InvalidConfig(format!(
            "patch size {patch} exceeds image size {h}x{w}"
        )));
    }
    let r0 = if h == patch { 0 } else { rng.index(h - patch + 1) };
    let c0 = if w == patch { 0 } else { rng.index(w - patch + 1) };
    let (flip_h, flip_v) = if flip { (rng.flip(), rng.flip()) } else { (false, false) };

    let cut = |plane: &Plane| -> Plane {
        let mut view = plane
            .slice(ndarray::s![r0..r0 + patch, c0..c0 + patch])
            .to_owned();
        if flip_h {
            view.invert_axis(ndarray::Axis(1));
        }
        if flip_v {
            view.invert_axis(ndarray::Axis(0));
        }
        // Flips leave reversed strides behind; the tape wants contiguous
        // row-major data.
        view.as_standard_layout().to_owned()
    };

    MaskedScene::new(
        cut(&scene.y),
        cut(&scene.mask),
        scene.x_gt.as_ref().map(&cut),
        scene.x_li.as_ref().map(&cut),
    )
}

fn global_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Mean masked validation PSNR of `X^{(T)}` against ground truth.
pub fn validation_psnr(params: &NetworkParams, scenes: &[MaskedScene]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        let Some(x_gt) = scene.x_gt.as_ref() else { continue };
        let x = reconstruct(params, scene)?;
        let psnr = masked_psnr(&x, x_gt, &scene.mask, 1.0);
        if psnr.is_finite() {
            total += psnr;
            count += 1;
        }
    }
    Ok(if count == 0 { None } else { Some(total / count as f64) })
}

/// Trains in place. Scenes must carry `x_gt` and `x_li`. Returns the log;
/// the Adam state goes in and out so interrupted runs can resume
/// deterministically.
pub fn train(
    params: &mut NetworkParams,
    train_scenes: &[MaskedScene],
    val_scenes: &[MaskedScene],
    weights: &LossWeights,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    start_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    weights.validate()?;
    if train_scenes.is_empty() {
        return Err(MarError::MissingInput("empty training dataset".into()));
    }
    for (i, scene) in train_scenes.iter().enumerate() {
        if scene.x_gt.is_none() || scene.x_li.is_none() {
            return Err(MarError::MissingInput(format!(
                "training scene {i} is missing x_gt or x_li"
            )));
        }
    }

    let mut log = TrainLog::default();
    let mut step = adam.step;
    let mut last_val: Option<f64> = None;

    for epoch in start_epoch..start_epoch + cfg.epochs {
        // Per-epoch stream derived from (seed, epoch): resuming at an
        // epoch boundary reproduces the uninterrupted run.
        let mut rng = Rng::new(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        rng.shuffle(&mut order);
        let lr = cfg.lr_at_epoch(epoch);

        for chunk in order.chunks(cfg.batch_size) {
            // Augmentation decisions are drawn sequentially before the
            // parallel section.
            let batch: Vec<MaskedScene> = chunk
                .iter()
                .map(|&i| augment(&train_scenes[i], cfg.patch_size, cfg.flip_augment, &mut rng))
                .collect::<Result<_>>()?;

            let results: Vec<(f64, Vec<ArrayD<f64>>, Vec<StatUpdate>)> = batch
                .par_iter()
                .map(|scene| scene_loss_and_grads(params, scene, weights))
                .collect::<Result<_>>()?;

            let batch_len = results.len() as f64;
            let mut mean_loss = 0.0;
            let mut grads: Option<Vec<ArrayD<f64>>> = None;
            for (loss, g, _) in &results {
                mean_loss += loss / batch_len;
                match &mut grads {
                    None => grads = Some(g.clone()),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += b;
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                *g /= batch_len;
            }

            let norm = global_norm(&grads);
            if norm > cfg.clip_norm {
                let scale = cfg.clip_norm / norm;
                for g in &mut grads {
                    *g *= scale;
                }
            }

            let warm = if cfg.warmup_steps > 0 && adam.step < cfg.warmup_steps {
                (adam.step + 1) as f64 / cfg.warmup_steps as f64
            } else {
                1.0
            };
            adam.apply(params, &grads, lr * warm);

            // Fold normalization statistics in sample order.
            for (_, _, updates) in &results {
                params.apply_stat_updates(updates);
            }

            step += 1;
            log.rows.push(TrainLogRow {
                epoch,
                step,
                loss: mean_loss,
                val_psnr: None,
                lr,
            });
        }

        if !val_scenes.is_empty() {
            last_val = validation_psnr(params, val_scenes)?;
        }
        if let Some(row) = log.rows.last_mut() {
            row.val_psnr = last_val;
        }
    }

    Ok(log)
}
