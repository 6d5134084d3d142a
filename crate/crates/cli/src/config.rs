//! Run configuration: INI-style sections of `key = value` pairs with
//! strict unknown-key rejection, scale-dependent defaults, and stable
//! re-serialization so every run can archive its fully resolved config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mar_core::ctsim::{default_n_bins, PhantomKind, SimConfig};
use mar_core::model::StepSizes;
use mar_core::net::params::NetHyper;
use mar_core::net::{LossWeights, TrainConfig};
use mar_core::solver::{ClassicalProxConfig, Var};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

/// Geometry scale: desk defaults or the full-scale geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn parse(s: &str) -> CResult<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(ConfigError(format!("unknown scale '{other}' (desk|paper)"))),
        }
    }
}

/// Everything a run needs, resolved from scale defaults plus the file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub jobs: usize,

    // [sim]
    pub sim: SimConfig,
    pub phantom: PhantomKind,
    pub train_cases: usize,
    pub test_cases: usize,
    pub train_masks: usize,
    pub test_masks: usize,
    pub mask_disks: usize,
    pub mask_radius: (f64, f64),

    // [model]
    pub hyper: NetHyper,
    pub eta_init: (f64, f64, f64),

    // [solver]
    pub solver: ClassicalProxConfig,
    pub dict_seed: u64,

    // [train]
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub val_fraction: f64,
}

impl RunConfig {
    pub fn defaults(scale: Scale) -> Self {
        let sim = match scale {
            Scale::Desk => SimConfig::desk(),
            Scale::Paper => SimConfig::paper(),
        };
        RunConfig {
            seed: 0,
            scale,
            jobs: 0,
            sim,
            phantom: PhantomKind::RandomEllipses,
            train_cases: 16,
            test_cases: 4,
            train_masks: 9,
            test_masks: 2,
            mask_disks: 1,
            mask_radius: (2.0, 4.0),
            hyper: NetHyper::paper(),
            eta_init: (0.5, 0.5, 0.5),
            solver: ClassicalProxConfig::default(),
            dict_seed: 7,
            train: TrainConfig::default(),
            loss_weights: LossWeights::default(),
            val_fraction: 0.2,
        }
    }

    /// Parses the file over scale defaults; rejects unknown sections and
    /// keys.
    pub fn load(path: &Path, scale: Scale) -> CResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, scale)
    }

    pub fn parse(text: &str, scale: Scale) -> CResult<Self> {
        let mut cfg = RunConfig::defaults(scale);
        let sections = split_sections(text)?;
        for (section, entries) in &sections {
            for (key, value) in entries {
                cfg.apply(section, key, value)
                    .map_err(|e| ConfigError(format!("[{section}] {key}: {}", e.0)))?;
            }
        }
        // Derived default: a zero bin count means "cover the diagonal".
        if cfg.sim.n_bins == 0 {
            cfg.sim.n_bins = default_n_bins(cfg.sim.image_size);
        }
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> CResult<()> {
        match section {
            "run" => match key {
                "seed" => self.seed = parse_num(value)?,
                "scale" => {
                    self.apply_scale(Scale::parse(value)?);
                }
                "jobs" => self.jobs = parse_num(value)?,
                _ => return unknown(section, key),
            },
            "sim" => match key {
                "image_size" => {
                    self.sim.image_size = parse_num(value)?;
                    self.sim.n_bins = default_n_bins(self.sim.image_size);
                }
                "n_views" => self.sim.n_views = parse_num(value)?,
                "n_bins" => self.sim.n_bins = parse_num(value)?,
                "full_rotation" => {
                    self.sim.span = if parse_bool(value)? {
                        2.0 * std::f64::consts::PI
                    } else {
                        std::f64::consts::PI
                    }
                }
                "hu_lo" => self.sim.hu_window.0 = parse_f64(value)?,
                "hu_hi" => self.sim.hu_window.1 = parse_f64(value)?,
                "metal_hu" => self.sim.metal_hu = parse_f64(value)?,
                "trace_amplification" => self.sim.trace_amplification = parse_f64(value)?,
                "noise_level" => self.sim.noise_level = parse_f64(value)?,
                "phantom" => {
                    self.phantom = match value {
                        "shepp_logan" => PhantomKind::SheppLogan,
                        "random_ellipses" => PhantomKind::RandomEllipses,
                        other => {
                            return Err(ConfigError(format!(
                                "unknown phantom '{other}' (shepp_logan|random_ellipses)"
                            )))
                        }
                    }
                }
                "train_cases" => self.train_cases = parse_num(value)?,
                "test_cases" => self.test_cases = parse_num(value)?,
                "train_masks" => self.train_masks = parse_num(value)?,
                "test_masks" => self.test_masks = parse_num(value)?,
                "mask_disks" => self.mask_disks = parse_num(value)?,
                "mask_radius_lo" => self.mask_radius.0 = parse_f64(value)?,
                "mask_radius_hi" => self.mask_radius.1 = parse_f64(value)?,
                _ => return unknown(section, key),
            },
            "model" => match key {
                "p" => self.hyper.filter_size = parse_num(value)?,
                "d" => self.hyper.dict_filters = parse_num(value)?,
                "n" => self.hyper.active_filters = parse_num(value)?,
                "n_p" => self.hyper.expand_channels = parse_num(value)?,
                "t" => self.hyper.stages = parse_num(value)?,
                "eta1_init" => self.eta_init.0 = parse_f64(value)?,
                "eta2_init" => self.eta_init.1 = parse_f64(value)?,
                "eta3_init" => self.eta_init.2 = parse_f64(value)?,
                _ => return unknown(section, key),
            },
            "solver" => match key {
                "lambda_m" => self.solver.lambda_m = parse_f64(value)?,
                "eta1" => self.solver.steps.eta1 = parse_f64(value)?,
                "eta2" => self.solver.steps.eta2 = parse_f64(value)?,
                "eta3" => self.solver.steps.eta3 = parse_f64(value)?,
                "max_iters" => self.solver.max_iters = parse_num(value)?,
                "tol" => self.solver.tol = parse_f64(value)?,
                "clamp" => {
                    self.solver.x_clamp = if value == "none" {
                        None
                    } else {
                        let (lo, hi) = value.split_once(',').ok_or_else(|| {
                            ConfigError("clamp wants 'none' or 'lo,hi'".into())
                        })?;
                        Some((parse_f64(lo.trim())?, parse_f64(hi.trim())?))
                    }
                }
                "update_order" => {
                    self.solver.update_order = parse_order(value)?;
                }
                "dict_seed" => self.dict_seed = parse_num(value)?,
                _ => return unknown(section, key),
            },
            "train" => match key {
                "batch_size" => self.train.batch_size = parse_num(value)?,
                "patch_size" => self.train.patch_size = parse_num(value)?,
                "learning_rate" => self.train.learning_rate = parse_f64(value)?,
                "epochs" => self.train.epochs = parse_num(value)?,
                "lr_milestones" => {
                    self.train.lr_milestones = if value.is_empty() {
                        vec![]
                    } else {
                        value
                            .split(',')
                            .map(|v| parse_num(v.trim()))
                            .collect::<CResult<_>>()?
                    }
                }
                "flip_augment" => self.train.flip_augment = parse_bool(value)?,
                "clip_norm" => self.train.clip_norm = parse_f64(value)?,
                "warmup_steps" => self.train.warmup_steps = parse_num(value)?,
                "val_fraction" => self.val_fraction = parse_f64(value)?,
                "mu_final" => self.loss_weights.mu_final = parse_f64(value)?,
                "mu_intermediate" => self.loss_weights.mu_intermediate = parse_f64(value)?,
                "omega1" => self.loss_weights.omega1 = parse_f64(value)?,
                "omega2" => self.loss_weights.omega2 = parse_f64(value)?,
                _ => return unknown(section, key),
            },
            other => return Err(ConfigError(format!("unknown section [{other}]"))),
        }
        Ok(())
    }

    fn apply_scale(&mut self, scale: Scale) {
        let fresh = RunConfig::defaults(scale);
        self.scale = scale;
        self.sim = fresh.sim;
    }

    /// Stable INI serialization of the fully resolved configuration.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "scale = {}",
            match self.scale {
                Scale::Desk => "desk",
                Scale::Paper => "paper",
            }
        );
        let _ = writeln!(out, "jobs = {}", self.jobs);
        let _ = writeln!(out, "\n[sim]");
        let _ = writeln!(out, "image_size = {}", self.sim.image_size);
        let _ = writeln!(out, "n_views = {}", self.sim.n_views);
        let _ = writeln!(out, "n_bins = {}", self.sim.n_bins);
        let _ = writeln!(
            out,
            "full_rotation = {}",
            self.sim.span > std::f64::consts::PI * 1.5
        );
        let _ = writeln!(out, "hu_lo = {}", self.sim.hu_window.0);
        let _ = writeln!(out, "hu_hi = {}", self.sim.hu_window.1);
        let _ = writeln!(out, "metal_hu = {}", self.sim.metal_hu);
        let _ = writeln!(out, "trace_amplification = {}", self.sim.trace_amplification);
        let _ = writeln!(out, "noise_level = {}", self.sim.noise_level);
        let _ = writeln!(
            out,
            "phantom = {}",
            match self.phantom {
                PhantomKind::SheppLogan => "shepp_logan",
                PhantomKind::RandomEllipses => "random_ellipses",
            }
        );
        let _ = writeln!(out, "train_cases = {}", self.train_cases);
        let _ = writeln!(out, "test_cases = {}", self.test_cases);
        let _ = writeln!(out, "train_masks = {}", self.train_masks);
        let _ = writeln!(out, "test_masks = {}", self.test_masks);
        let _ = writeln!(out, "mask_disks = {}", self.mask_disks);
        let _ = writeln!(out, "mask_radius_lo = {}", self.mask_radius.0);
        let _ = writeln!(out, "mask_radius_hi = {}", self.mask_radius.1);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "p = {}", self.hyper.filter_size);
        let _ = writeln!(out, "d = {}", self.hyper.dict_filters);
        let _ = writeln!(out, "n = {}", self.hyper.active_filters);
        let _ = writeln!(out, "n_p = {}", self.hyper.expand_channels);
        let _ = writeln!(out, "t = {}", self.hyper.stages);
        let _ = writeln!(out, "eta1_init = {}", self.eta_init.0);
        let _ = writeln!(out, "eta2_init = {}", self.eta_init.1);
        let _ = writeln!(out, "eta3_init = {}", self.eta_init.2);
        let _ = writeln!(out, "\n[solver]");
        let _ = writeln!(out, "lambda_m = {}", self.solver.lambda_m);
        let _ = writeln!(out, "eta1 = {}", self.solver.steps.eta1);
        let _ = writeln!(out, "eta2 = {}", self.solver.steps.eta2);
        let _ = writeln!(out, "eta3 = {}", self.solver.steps.eta3);
        let _ = writeln!(out, "max_iters = {}", self.solver.max_iters);
        let _ = writeln!(out, "tol = {}", self.solver.tol);
        let _ = writeln!(
            out,
            "clamp = {}",
            match self.solver.x_clamp {
                None => "none".to_string(),
                Some((lo, hi)) => format!("{lo},{hi}"),
            }
        );
        let order: String = self
            .solver
            .update_order
            .iter()
            .map(|v| match v {
                Var::K => 'K',
                Var::M => 'M',
                Var::X => 'X',
            })
            .collect();
        let _ = writeln!(out, "update_order = {order}");
        let _ = writeln!(out, "dict_seed = {}", self.dict_seed);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(out, "patch_size = {}", self.train.patch_size);
        let _ = writeln!(out, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(out, "epochs = {}", self.train.epochs);
        let milestones: Vec<String> = self
            .train
            .lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect();
        let _ = writeln!(out, "lr_milestones = {}", milestones.join(","));
        let _ = writeln!(out, "flip_augment = {}", self.train.flip_augment);
        let _ = writeln!(out, "clip_norm = {}", self.train.clip_norm);
        let _ = writeln!(out, "warmup_steps = {}", self.train.warmup_steps);
        let _ = writeln!(out, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(out, "mu_final = {}", self.loss_weights.mu_final);
        let _ = writeln!(out, "mu_intermediate = {}", self.loss_weights.mu_intermediate);
        let _ = writeln!(out, "omega1 = {}", self.loss_weights.omega1);
        let _ = writeln!(out, "omega2 = {}", self.loss_weights.omega2);
        out
    }

    /// Archives the resolved config next to a run's outputs.
    pub fn archive(&self, out_dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.resolved.ini"), self.to_ini())
    }

    /// Per-stage step sizes for the classical solver (already carried in
    /// `solver.steps`; exposed for symmetry).
    pub fn solver_steps(&self) -> StepSizes {
        self.solver.steps
    }
}

fn split_sections(text: &str) -> CResult<Vec<(String, BTreeMap<String, String>)>> {
    let mut sections: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    let mut current: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError(format!("line {}: malformed section", lineno + 1)))?
                .trim()
                .to_string();
            sections.push((name, BTreeMap::new()));
            current = Some(sections.len() - 1);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key = value", lineno + 1)))?;
        let idx = current
            .ok_or_else(|| ConfigError(format!("line {}: key outside any section", lineno + 1)))?;
        let prev = sections[idx]
            .1
            .insert(key.trim().to_string(), value.trim().to_string());
        if prev.is_some() {
            return Err(ConfigError(format!(
                "line {}: duplicate key {}",
                lineno + 1,
                key.trim()
            )));
        }
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(s: &str) -> CResult<T> {
    s.parse()
        .map_err(|_| ConfigError(format!("cannot parse '{s}' as an integer")))
}

fn parse_f64(s: &str) -> CResult<f64> {
    s.parse()
        .map_err(|_| ConfigError(format!("cannot parse '{s}' as a number")))
}

fn parse_bool(s: &str) -> CResult<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError(format!("cannot parse '{other}' as a bool"))),
    }
}

fn parse_order(s: &str) -> CResult<[Var; 3]> {
    let chars: Vec<char> = s.trim().to_uppercase().chars().collect();
    if chars.len() != 3 {
        return Err(ConfigError("update_order wants three of K, M, X".into()));
    }
    let mut order = [Var::K; 3];
    for (i, c) in chars.iter().enumerate() {
        order[i] = match c {
            'K' => Var::K,
            'M' => Var::M,
            'X' => Var::X,
            other => return Err(ConfigError(format!("unknown variable '{other}'"))),
        };
    }
    Ok(order)
}

fn unknown(section: &str, key: &str) -> CResult<()> {
    Err(ConfigError(format!("unknown key '{key}' in [{section}]")))
}
