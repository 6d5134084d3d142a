//! Case bundles on disk: little-endian 32-bit float rasters plus a JSON
//! sidecar.
//!
//! A case directory holds `Y.raw`, `Xgt.raw`, `I.raw`, optionally
//! `Xli.raw` (row-major f32) and `meta.json` with the shape, HU window,
//! simulation config and seed. Sinograms use the same raw-plus-sidecar
//! scheme. Raw ordering and field layout are bit-stable; PNG and other
//! visualizations are derived elsewhere.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ctsim::{SimConfig, Sinogram};
use crate::error::{MarError, Result};
use crate::model::MaskedScene;
use crate::tensor::Plane;

/// Sidecar for a case bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMeta {
    pub height: usize,
    pub width: usize,
    pub hu_window: (f64, f64),
    pub sim: SimConfig,
    pub seed: u64,
    /// Metal pixel count, for grouping metrics by metal size.
    pub metal_pixels: usize,
}

/// Writes a plane as row-major little-endian f32.
pub fn write_raw_f32(path: &Path, plane: &Plane) -> Result<()> {
    let mut buf = Vec::with_capacity(plane.len() * 4);
    for &v in plane.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| MarError::io(path, e))
}

/// Reads a row-major little-endian f32 raster with the given shape.
pub fn read_raw_f32(path: &Path, height: usize, width: usize) -> Result<Plane> {
    let mut file = fs::File::open(path).map_err(|e| MarError::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| MarError::io(path, e))?;
    let expected = height * width * 4;
    if buf.len() != expected {
        return Err(MarError::DimensionMismatch {
            context: "read_raw_f32",
            expected: format!("{expected} bytes"),
            got: format!("{} bytes in {}", buf.len(), path.display()),
        });
    }
    let mut plane = Array2::zeros((height, width));
    for (i, v) in plane.iter_mut().enumerate() {
        let bytes = [buf[4 * i], buf[4 * i + 1], buf[4 * i + 2], buf[4 * i + 3]];
        let value = f32::from_le_bytes(bytes) as f64;
        if !value.is_finite() {
            return Err(MarError::NonFinite(path.display().to_string()));
        }
        *v = value;
    }
    Ok(plane)
}

/// Writes a full case bundle into `dir` (created if needed).
pub fn write_case_bundle(dir: &Path, scene: &MaskedScene, meta: &CaseMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MarError::io(dir, e))?;
    write_raw_f32(&dir.join("Y.raw"), &scene.y)?;
    write_raw_f32(&dir.join("I.raw"), &scene.mask)?;
    if let Some(x_gt) = &scene.x_gt {
        write_raw_f32(&dir.join("Xgt.raw"), x_gt)?;
    }
    if let Some(x_li) = &scene.x_li {
        write_raw_f32(&dir.join("Xli.raw"), x_li)?;
    }
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(meta).map_err(|e| MarError::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| MarError::io(&meta_path, e))
}

/// Reads a case bundle back. `Xgt.raw` and `Xli.raw` are optional.
pub fn read_case_bundle(dir: &Path) -> Result<(MaskedScene, CaseMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        MarError::MissingInput(format!("{} ({e})", meta_path.display()))
    })?;
    let meta: CaseMeta =
        serde_json::from_str(&text).map_err(|e| MarError::json(&meta_path, e))?;
    let (h, w) = (meta.height, meta.width);
    let y = read_raw_f32(&dir.join("Y.raw"), h, w)?;
    let mask = read_raw_f32(&dir.join("I.raw"), h, w)?;
    let x_gt = {
        let p = dir.join("Xgt.raw");
        if p.exists() {
            Some(read_raw_f32(&p, h, w)?)
        } else {
            None
        }
    };
    let x_li = {
        let p = dir.join("Xli.raw");
        if p.exists() {
            Some(read_raw_f32(&p, h, w)?)
        } else {
            None
        }
    };
    Ok((MaskedScene::new(y, mask, x_gt, x_li)?, meta))
}

/// Sidecar for a sinogram raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinogramMeta {
    pub n_views: usize,
    pub n_bins: usize,
    pub span: f64,
}

pub fn write_sinogram(path_base: &Path, sino: &Sinogram) -> Result<()> {
    let raw = path_base.with_extension("raw");
    write_raw_f32(&raw, &sino.data)?;
    let meta = SinogramMeta {
        n_views: sino.n_views(),
        n_bins: sino.n_bins(),
        span: sino.span,
    };
    let meta_path = path_base.with_extension("json");
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| MarError::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| MarError::io(&meta_path, e))
}

pub fn read_sinogram(path_base: &Path) -> Result<Sinogram> {
    let meta_path = path_base.with_extension("json");
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        MarError::MissingInput(format!("{} ({e})", meta_path.display()))
    })?;
    let meta: SinogramMeta =
        serde_json::from_str(&text).map_err(|e| MarError::json(&meta_path, e))?;
    let data = read_raw_f32(&path_base.with_extension("raw"), meta.n_views, meta.n_bins)?;
    Ok(Sinogram {
        data,
        span: meta.span,
    })
}

/// Case directories under `corpus_dir`, sorted by name.
pub fn list_cases(corpus_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cases = Vec::new();
    let entries = fs::read_dir(corpus_dir).map_err(|e| {
        MarError::MissingInput(format!("{} ({e})", corpus_dir.display()))
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| MarError::io(corpus_dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("meta.json").exists() {
            cases.push(path);
        }
    }
    cases.sort();
    Ok(cases)
}

/// Appends CSV rows; writes the header first when creating the file.
pub struct CsvWriter {
    file: fs::File,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| MarError::io(path, e))?;
        writeln!(file, "{header}").map_err(|e| MarError::io(path, e))?;
        Ok(CsvWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| MarError::io(&self.path, e))
    }
}
