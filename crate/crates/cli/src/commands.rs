//! The pipeline commands: simulate a corpus, run the classical solver,
//! train the network, reconstruct, evaluate, and benchmark. Commands
//! compose through case-bundle directories: simulate → (solve | train →
//! reconstruct) → eval with no manual file surgery.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mar_core::ctsim::{li_mar, make_phantom, simulate_case, MetalMask};
use mar_core::io::{
    list_cases, read_case_bundle, read_raw_f32, write_case_bundle, write_raw_f32, CaseMeta,
    CsvWriter,
};
use mar_core::metrics::{evaluate, masked_psnr};
use mar_core::model::{fidelity, synthesize_artifact, Dictionary, MaskedScene, WeightMatrix};
use mar_core::net::checkpoint;
use mar_core::net::{
    reconstruct, stage_images, train, AdamState, NetworkParams, TrainLog,
};
use mar_core::rng::Rng;
use mar_core::solver::{run_solver, write_trace_csv, SolverState};
use mar_core::tensor::Plane;
use mar_core::{MarError, Result};
use ndarray::{Array2, Array3};

use crate::config::RunConfig;
use crate::png_out::{write_loss_curve_png, write_panel_png};

/// Simulates the train/test corpora under `out/train` and `out/test`.
/// Train and test cases draw from disjoint metal-mask pools.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.sim.validate()?;
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;

    // Mask pools: one seeded stream, train masks first, then test masks.
    let mut mask_rng = Rng::new(cfg.seed ^ 0x6d61_736b);
    let make_mask = |rng: &mut Rng| {
        MetalMask::random_disks(
            cfg.sim.image_size,
            cfg.mask_disks,
            cfg.mask_radius.0,
            cfg.mask_radius.1,
            rng,
        )
    };
    let train_masks: Vec<MetalMask> = (0..cfg.train_masks).map(|_| make_mask(&mut mask_rng)).collect();
    let test_masks: Vec<MetalMask> = (0..cfg.test_masks).map(|_| make_mask(&mut mask_rng)).collect();

    let mut written = Vec::new();
    for (split, count, masks, salt) in [
        ("train", cfg.train_cases, &train_masks, 0x7472u64),
        ("test", cfg.test_cases, &test_masks, 0x7465u64),
    ] {
        let split_dir = out_dir.join(split);
        for i in 0..count {
            let case_seed = cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64);
            let phantom = make_phantom(cfg.phantom, cfg.sim.image_size, case_seed ^ 0x5048);
            let mask = &masks[i % masks.len()];
            let mut sim = cfg.sim.clone();
            sim.seed = case_seed;
            let mut scene = simulate_case(&phantom, mask, &sim)?;
            scene.x_li = Some(li_mar(&scene, &sim)?);
            let meta = CaseMeta {
                height: sim.image_size,
                width: sim.image_size,
                hu_window: sim.hu_window,
                sim: sim.clone(),
                seed: case_seed,
                metal_pixels: mask.metal_pixel_count(),
            };
            let case_dir = split_dir.join(format!("case_{i:03}"));
            write_case_bundle(&case_dir, &scene, &meta)?;
            written.push(case_dir);
        }
    }
    Ok(written)
}

/// Runs the classical solver on one case bundle. The dictionary comes
/// from a checkpoint when given, otherwise it is a seeded random bank.
pub fn cmd_solve(
    cfg: &RunConfig,
    case_dir: &Path,
    out_dir: &Path,
    checkpoint_path: Option<&Path>,
) -> Result<SolverState> {
    let (scene, meta) = read_case_bundle(case_dir)?;
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;

    let dict = match checkpoint_path {
        Some(path) => {
            let (params, _, _) = checkpoint::load(path)?;
            Dictionary::from_array(params.dict.clone())?
        }
        None => {
            let mut rng = Rng::new(cfg.dict_seed);
            Dictionary::random(cfg.hyper.filter_size, cfg.hyper.dict_filters, &mut rng)?
        }
    };

    let (h, w) = scene.dims();
    let n = cfg.hyper.active_filters;
    let x0 = scene
        .x_li
        .clone()
        .unwrap_or_else(|| scene.y.clone());
    let init = SolverState::initial(
        WeightMatrix::uniform(dict.filter_count(), n),
        Array3::zeros((h, w, n)),
        x0,
    );
    let state = run_solver(&scene, &dict, init, &cfg.solver)?;

    write_raw_f32(&out_dir.join("X.raw"), &state.x)?;
    write_trace_csv(&state, &out_dir.join("trace.csv"))?;

    let mut panel: Vec<(&str, &Plane)> = vec![("Y", &scene.y)];
    if let Some(x_li) = scene.x_li.as_ref() {
        panel.push(("X_LI", x_li));
    }
    panel.push(("X_solver", &state.x));
    if let Some(x_gt) = scene.x_gt.as_ref() {
        panel.push(("X_gt", x_gt));
    }
    write_panel_png(&out_dir.join("panel.png"), &panel)?;
    let _ = meta;
    Ok(state)
}

/// Trains the network on a corpus directory; writes `checkpoint.bin`
/// (+ sidecar), `log.csv`, `loss_curve.png` and the resolved config.
pub fn cmd_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainLog> {
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;
    let case_dirs = list_cases(corpus_dir)?;
    if case_dirs.is_empty() {
        return Err(MarError::MissingInput(format!(
            "no case bundles under {}",
            corpus_dir.display()
        )));
    }
    let mut scenes = Vec::with_capacity(case_dirs.len());
    for dir in &case_dirs {
        let (scene, _) = read_case_bundle(dir)?;
        scenes.push(scene);
    }

    // Validation split from the tail (cases are name-sorted, so the
    // split is stable).
    let n_val = ((scenes.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(scenes.len().saturating_sub(1));
    let split = scenes.len() - n_val;
    let (train_scenes, val_scenes) = scenes.split_at(split);

    let (mut params, mut adam, start_epoch) = match resume {
        Some(path) => {
            let (params, adam, meta) = checkpoint::load(path)?;
            let start = meta
                .get("epochs_done")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0);
            let adam = adam.unwrap_or_else(|| AdamState::zeros_like(&params));
            (params, adam, start)
        }
        None => {
            let mut params = NetworkParams::seeded(cfg.hyper, cfg.seed)?;
            params.set_initial_etas(cfg.eta_init.0, cfg.eta_init.1, cfg.eta_init.2);
            let adam = AdamState::zeros_like(&params);
            (params, adam, 0)
        }
    };

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let log = train(
        &mut params,
        train_scenes,
        val_scenes,
        &cfg.loss_weights,
        &train_cfg,
        &mut adam,
        start_epoch,
    )?;

    log.write_csv(&out_dir.join("log.csv"))?;
    let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    if !losses.is_empty() {
        write_loss_curve_png(&out_dir.join("loss_curve.png"), &losses)?;
    }

    let mut extra = BTreeMap::new();
    extra.insert(
        "epochs_done".to_string(),
        (start_epoch + cfg.train.epochs).to_string(),
    );
    extra.insert("train_seed".to_string(), cfg.seed.to_string());
    checkpoint::save(&out_dir.join("checkpoint.bin"), &params, Some(&adam), &extra)?;
    Ok(log)
}

/// Reconstructs one case or a whole corpus with a trained checkpoint;
/// writes `<case>.raw` plus a per-stage gallery with T+1 frames.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    case_or_corpus: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (params, _, _) = checkpoint::load(checkpoint_path)?;
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;

    let case_dirs = if case_or_corpus.join("meta.json").exists() {
        vec![case_or_corpus.to_path_buf()]
    } else {
        list_cases(case_or_corpus)?
    };
    if case_dirs.is_empty() {
        return Err(MarError::MissingInput(format!(
            "no case bundles under {}",
            case_or_corpus.display()
        )));
    }

    let mut outputs = Vec::new();
    for dir in &case_dirs {
        let (scene, _) = read_case_bundle(dir)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "case".to_string());
        let frames = stage_images(&params, &scene)?;
        let x_final = frames.last().expect("at least one stage").0.clone();
        let raw_path = out_dir.join(format!("{name}.raw"));
        write_raw_f32(&raw_path, &x_final)?;
        let panel: Vec<(String, Plane)> = frames
            .iter()
            .enumerate()
            .map(|(t, (x, _))| (format!("X{t}"), x.clone()))
            .collect();
        let panel_refs: Vec<(&str, &Plane)> = panel
            .iter()
            .map(|(name, plane)| (name.as_str(), plane))
            .collect();
        write_panel_png(&out_dir.join(format!("{name}_gallery.png")), &panel_refs)?;
        outputs.push(raw_path);
    }
    Ok(outputs)
}

/// One evaluated method: name plus reconstruction lookup.
enum MethodSource<'a> {
    Input,
    Li,
    ReconDir(&'a Path),
}

/// Evaluates reconstructions over a corpus: metrics.csv with one row per
/// (case, method) and summary.csv grouped by method and metal size.
pub fn cmd_eval(
    cfg: &RunConfig,
    corpus_dir: &Path,
    recon_dirs: &[PathBuf],
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;
    let case_dirs = list_cases(corpus_dir)?;
    if case_dirs.is_empty() {
        return Err(MarError::MissingInput(format!(
            "no case bundles under {}",
            corpus_dir.display()
        )));
    }

    let mut methods: Vec<(String, MethodSource)> = vec![
        ("input".to_string(), MethodSource::Input),
        ("li".to_string(), MethodSource::Li),
    ];
    for dir in recon_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "recon".to_string());
        methods.push((name, MethodSource::ReconDir(dir)));
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = CsvWriter::create(&metrics_path, "case_id,method,psnr,ssim")?;
    // (method, metal_pixels, psnr, ssim) accumulated for the summary.
    let mut rows: Vec<(String, usize, f64, f64)> = Vec::new();

    for dir in &case_dirs {
        let (scene, meta) = read_case_bundle(dir)?;
        let Some(x_gt) = scene.x_gt.as_ref() else {
            return Err(MarError::MissingInput(format!(
                "case {} has no ground truth",
                dir.display()
            )));
        };
        let case_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        for (name, source) in &methods {
            let image: Option<Plane> = match source {
                MethodSource::Input => Some(scene.y.clone()),
                MethodSource::Li => scene.x_li.clone(),
                MethodSource::ReconDir(rdir) => {
                    let raw = rdir.join(format!("{case_id}.raw"));
                    if raw.exists() {
                        Some(read_raw_f32(&raw, meta.height, meta.width)?)
                    } else {
                        None
                    }
                }
            };
            let Some(image) = image else { continue };
            let report = evaluate(&image, x_gt, &scene.mask);
            let psnr_text = if report.psnr_infinite {
                "inf".to_string()
            } else {
                format!("{}", report.psnr_db)
            };
            csv.row(&[
                case_id.clone(),
                name.clone(),
                psnr_text,
                format!("{}", report.ssim),
            ])?;
            rows.push((name.clone(), meta.metal_pixels, report.psnr_db, report.ssim));
        }
    }

    // Summary grouped by method and metal-size bin (small/medium/large by
    // terciles of the corpus).
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.1).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let bin_of = |pixels: usize| -> &'static str {
        if sizes.len() < 3 {
            return "all";
        }
        let lo = sizes[sizes.len() / 3];
        let hi = sizes[2 * sizes.len() / 3];
        if pixels <= lo {
            "small"
        } else if pixels >= hi {
            "large"
        } else {
            "medium"
        }
    };
    let mut groups: BTreeMap<(String, &'static str), (f64, f64, usize)> = BTreeMap::new();
    for (method, pixels, psnr, ssim) in &rows {
        let entry = groups
            .entry((method.clone(), bin_of(*pixels)))
            .or_insert((0.0, 0.0, 0));
        if psnr.is_finite() {
            entry.0 += psnr;
        }
        entry.1 += ssim;
        entry.2 += 1;
    }
    let summary_path = out_dir.join("summary.csv");
    let mut summary = CsvWriter::create(&summary_path, "method,metal_size,mean_psnr,mean_ssim,cases")?;
    for ((method, bin), (psnr_sum, ssim_sum, count)) in &groups {
        summary.row(&[
            method.clone(),
            bin.to_string(),
            format!("{}", psnr_sum / *count as f64),
            format!("{}", ssim_sum / *count as f64),
            count.to_string(),
        ])?;
    }
    Ok(metrics_path)
}

/// Benchmark report: parameter count, reconstruction timing over repeated
/// runs, and the host description.
pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    image_size: usize,
    runs: usize,
    out_dir: &Path,
) -> Result<String> {
    let (params, _, _) = checkpoint::load(checkpoint_path)?;
    cfg.archive(out_dir).map_err(|e| MarError::io(out_dir, e))?;

    // A synthetic scene at the requested size keeps the benchmark
    // self-contained.
    let mut rng = Rng::new(1);
    let x = Array2::from_shape_fn((image_size, image_size), |_| rng.range(0.2, 0.8));
    let y = &x + &Array2::from_shape_fn((image_size, image_size), |_| rng.range(-0.1, 0.1));
    let mut mask = Array2::ones((image_size, image_size));
    mask[[image_size / 2, image_size / 2]] = 0.0;
    let scene = MaskedScene::new(y, mask, Some(x.clone()), Some(x))?;

    let runs = runs.max(20);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = std::time::Instant::now();
        let _ = reconstruct(&params, &scene)?;
        times.push(start.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    let sd = var.sqrt();

    let hardware = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string())
        })
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown CPU".to_string());
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);

    let count = params.param_count();
    let reference = 1_602_809i64;
    let report = format!(
        "parameters: {count}\n\
         reference parameter count: {reference} (diff {})\n\
         reconstruction at {image_size}x{image_size}: mean {mean:.4} s, sd {sd:.4} s over {runs} runs\n\
         hardware: {hardware} ({threads} threads)\n",
        count as i64 - reference
    );
    std::fs::write(out_dir.join("bench.txt"), &report)
        .map_err(|e| MarError::io(out_dir, e))?;
    Ok(report)
}

/// Masked fidelity ‖I ⊙ (Y − X^t − A^t)‖² per stage for a trained
/// checkpoint on one scene; the interpretability diagnostic.
pub fn stage_fidelity_trace(params: &NetworkParams, scene: &MaskedScene) -> Result<Vec<f64>> {
    let frames = stage_images(params, scene)?;
    Ok(frames
        .iter()
        .map(|(x, a)| fidelity(scene, x, a))
        .collect())
}

/// Mean masked PSNR of a reconstruction directory against a corpus.
pub fn corpus_psnr(corpus_dir: &Path, images: &dyn Fn(&MaskedScene, &CaseMeta) -> Option<Plane>) -> Result<f64> {
    let case_dirs = list_cases(corpus_dir)?;
    let mut total = 0.0;
    let mut count = 0;
    for dir in &case_dirs {
        let (scene, meta) = read_case_bundle(dir)?;
        let Some(x_gt) = scene.x_gt.as_ref() else { continue };
        let Some(image) = images(&scene, &meta) else { continue };
        let psnr = masked_psnr(&image, x_gt, &scene.mask, 1.0);
        if psnr.is_finite() {
            total += psnr;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MarError::MissingInput("no evaluable cases".into()));
    }
    Ok(total / count as f64)
}

/// Loads the dictionary and synthesizes the artifact for a solver state;
/// convenience shared by tests.
pub fn solver_artifact(dict: &Dictionary, state: &SolverState) -> Result<Plane> {
    synthesize_artifact(dict, &state.k, &state.m)
}
