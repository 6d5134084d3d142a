//! Checkpoint container: a single binary file with a versioned header, a
//! manifest of named tensors (name, shape, dtype) and little-endian f64
//! payloads, plus a human-readable `key=value` sidecar recording the
//! architecture and any caller metadata.
//!
//! Saved tensors: every trainable parameter, the normalization buffers,
//! and (optionally) the Adam moments, so training resumes exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{MarError, Result};
use crate::net::params::{NetHyper, NetworkParams};
use crate::net::train::AdamState;

const MAGIC: &[u8; 8] = b"MARCKPT\0";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Sidecar path: `<checkpoint>.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &ArrayD<f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    buf.push(tensor.ndim() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(MarError::Checkpoint(format!(
                "truncated checkpoint {}",
                self.path.display()
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Saves parameters, buffers and optional optimizer state, plus a sidecar
/// with the hyperparameters and caller metadata (sorted keys, stable
/// bytes).
pub fn save(
    path: &Path,
    params: &NetworkParams,
    adam: Option<&AdamState>,
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f64>)> = Vec::new();
    params.visit(&mut |name, t| tensors.push((name.to_string(), t)));
    params.visit_buffers(&mut |name, t| tensors.push((format!("buffer.{name}"), t)));
    if let Some(state) = adam {
        let names = params.param_names();
        for (name, m) in names.iter().zip(state.m.iter()) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(state.v.iter()) {
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        tensors.push((
            "adam.step".to_string(),
            ArrayD::from_elem(IxDyn(&[]), state.step as f64),
        ));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        write_tensor(&mut buf, name, tensor);
    }
    std::fs::write(path, buf).map_err(|e| MarError::io(path, e))?;

    let mut meta = BTreeMap::new();
    meta.insert("format_version".to_string(), VERSION.to_string());
    meta.insert("filter_size".to_string(), params.hyper.filter_size.to_string());
    meta.insert("dict_filters".to_string(), params.hyper.dict_filters.to_string());
    meta.insert(
        "active_filters".to_string(),
        params.hyper.active_filters.to_string(),
    );
    meta.insert(
        "expand_channels".to_string(),
        params.hyper.expand_channels.to_string(),
    );
    meta.insert("stages".to_string(), params.hyper.stages.to_string());
    meta.insert("has_adam".to_string(), adam.is_some().to_string());
    meta.insert("param_count".to_string(), params.param_count().to_string());
    for (k, v) in extra_meta {
        meta.insert(k.clone(), v.clone());
    }
    let sidecar = sidecar_path(path);
    let mut file = std::fs::File::create(&sidecar).map_err(|e| MarError::io(&sidecar, e))?;
    for (k, v) in &meta {
        writeln!(file, "{k}={v}").map_err(|e| MarError::io(&sidecar, e))?;
    }
    Ok(())
}

fn parse_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MarError::MissingInput(format!("{} ({e})", path.display())))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MarError::Checkpoint(format!(
                "malformed sidecar line in {}: {line}",
                path.display()
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            MarError::Checkpoint(format!(
                "sidecar {} is missing {key}",
                path.display()
            ))
        })
}

/// Loads a checkpoint; returns the parameters, the optimizer state when
/// present, and the sidecar metadata.
pub fn load(path: &Path) -> Result<(NetworkParams, Option<AdamState>, BTreeMap<String, String>)> {
    let sidecar = sidecar_path(path);
    let meta = parse_sidecar(&sidecar)?;
    let hyper = NetHyper {
        filter_size: meta_usize(&meta, "filter_size", &sidecar)?,
        dict_filters: meta_usize(&meta, "dict_filters", &sidecar)?,
        active_filters: meta_usize(&meta, "active_filters", &sidecar)?,
        expand_channels: meta_usize(&meta, "expand_channels", &sidecar)?,
        stages: meta_usize(&meta, "stages", &sidecar)?,
    };

    let mut file = std::fs::File::open(path)
        .map_err(|e| MarError::MissingInput(format!("{} ({e})", path.display())))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| MarError::io(path, e))?;
    let mut reader = Reader {
        data: &data,
        pos: 0,
        path,
    };
    if reader.take(8)? != MAGIC {
        return Err(MarError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(MarError::Checkpoint(format!(
            "unsupported checkpoint version {version} in {}",
            path.display()
        )));
    }
    let count = reader.u32()? as usize;
    let mut tensors: std::collections::HashMap<String, ArrayD<f64>> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = reader.u32()? as usize;
        let name = String::from_utf8(reader.take(name_len)?.to_vec())
            .map_err(|e| MarError::Checkpoint(format!("bad tensor name: {e}")))?;
        let dtype = reader.u8()?;
        if dtype != DTYPE_F64 {
            return Err(MarError::Checkpoint(format!(
                "unsupported dtype {dtype} for {name}"
            )));
        }
        let ndim = reader.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(reader.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = reader.take(len * 8)?;
        let mut values = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| MarError::Checkpoint(format!("bad shape for {name}: {e}")))?;
        tensors.insert(name, tensor);
    }

    let mut params = NetworkParams::seeded(hyper, 0)?;
    let mut missing: Vec<String> = Vec::new();
    params.visit_mut(&mut |name, current| match tensors.get(name) {
        Some(t) if t.shape() == current.shape() => t.clone(),
        Some(t) => {
            missing.push(format!("{name} (shape {:?} vs {:?})", t.shape(), current.shape()));
            current
        }
        None => {
            missing.push(name.to_string());
            current
        }
    });
    params.visit_buffers_mut(&mut |name, current| {
        match tensors.get(&format!("buffer.{name}")) {
            Some(t) if t.shape() == current.shape() => t.clone(),
            _ => {
                missing.push(format!("buffer.{name}"));
                current
            }
        }
    });
    if !missing.is_empty() {
        return Err(MarError::Checkpoint(format!(
            "checkpoint {} is missing or mismatches tensors: {}",
            path.display(),
            missing.join(", ")
        )));
    }

    let adam = if meta.get("has_adam").map(String::as_str) == Some("true") {
        let names = params.param_names();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            let mk = tensors.get(&format!("adam.m.{name}")).ok_or_else(|| {
                MarError::Checkpoint(format!("missing adam.m.{name} in {}", path.display()))
            })?;
            let vk = tensors.get(&format!("adam.v.{name}")).ok_or_else(|| {
                MarError::Checkpoint(format!("missing adam.v.{name} in {}", path.display()))
            })?;
            m.push(mk.clone());
            v.push(vk.clone());
        }
        let step = tensors
            .get("adam.step")
            .and_then(|t| t.iter().next().copied())
            .unwrap_or(0.0) as u64;
        Some(AdamState { m, v, step })
    } else {
        None
    };

    Ok((params, adam, meta))
}
