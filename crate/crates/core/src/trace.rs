//! Attention trace files.
//!
//! A trace is a directory holding `manifest.json` plus two raw blocks per
//! layer. Blocks are row-major little-endian IEEE-754 `f32` with no header:
//! `layer_NNN_t2t.f32` is `T x T` (`T*T*4` bytes) and `layer_NNN_t2v.f32` is
//! `T x V_l` (`T*V_l*4` bytes). Values are widened to `f64` on load. Unknown
//! manifest keys are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{AttentionMaps, LayerAttention};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Row-sum tolerance for traces produced elsewhere.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_index: usize,
    pub vision_count: usize,
    pub t2t: String,
    pub t2v: String,
    /// Original positions of the alive vision tokens; `0..vision_count` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_ids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    pub sample_id: String,
    pub num_layers: usize,
    pub text_count: usize,
    pub vision_counts: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub layers: Vec<LayerEntry>,
}

/// Non-fatal findings from loading a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWarning {
    pub layer_index: usize,
    pub row: usize,
    pub row_sum: f64,
}

#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub manifest: TraceManifest,
    pub maps: AttentionMaps,
    pub warnings: Vec<TraceWarning>,
}

fn encode(m: &Matrix) -> Vec<u8> {
    m.data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `maps` under `dir` (created if missing) and returns the manifest.
pub fn write_trace(maps: &AttentionMaps, dir: &Path) -> Result<TraceManifest> {
    maps.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(maps.num_layers());
    for l in &maps.per_layer {
        let t2t = format!("layer_{:03}_t2t.f32", l.layer_index);
        let t2v = format!("layer_{:03}_t2v.f32", l.layer_index);
        write_file(&dir.join(&t2t), &encode(&l.t2t))?;
        write_file(&dir.join(&t2v), &encode(&l.t2v))?;
        layers.push(LayerEntry {
            layer_index: l.layer_index,
            vision_count: l.vision_count(),
            t2t,
            t2v,
            vision_ids: Some(l.vision_ids.clone()),
        });
    }
    let manifest = TraceManifest {
        format_version: FORMAT_VERSION,
        sample_id: maps.sample_id.clone(),
        num_layers: maps.num_layers(),
        text_count: maps.text_count(),
        vision_counts: maps.per_layer.iter().map(|l| l.vision_count()).collect(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        layers,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

fn read_block(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = rows * cols * 4;
    if bytes.len() != want {
        return Err(Error::trace(
            &path,
            format!(
                "size mismatch: expected {want} bytes ({rows}x{cols} f32), found {}",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::trace(&path, "non-finite entry"));
    }
    Matrix::from_vec(rows, cols, data)
}

fn check_manifest(m: &TraceManifest, path: &Path) -> Result<()> {
    let bad = |reason: String| Err(Error::trace(path, reason));
    if m.format_version != FORMAT_VERSION {
        return bad(format!("unsupported format_version {}", m.format_version));
    }
    if m.dtype != "f32" || m.byte_order != "little" {
        return bad(format!("unsupported encoding {}/{}", m.dtype, m.byte_order));
    }
    if m.layers.len() != m.num_layers || m.vision_counts.len() != m.num_layers {
        return bad(format!(
            "num_layers {} disagrees with {} layer entries / {} vision counts",
            m.num_layers,
            m.layers.len(),
            m.vision_counts.len()
        ));
    }
    if m.vision_counts.windows(2).any(|w| w[1] > w[0]) {
        return bad("vision_counts must be non-increasing".into());
    }
    for (entry, &v) in m.layers.iter().zip(&m.vision_counts) {
        if entry.vision_count != v {
            return bad(format!(
                "layer {} vision_count {} disagrees with vision_counts entry {v}",
                entry.layer_index, entry.vision_count
            ));
        }
        if let Some(ids) = &entry.vision_ids {
            if ids.len() != v || ids.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!(
                    "layer {} has invalid vision_ids",
                    entry.layer_index
                ));
            }
        }
    }
    Ok(())
}

/// Loads and validates a trace directory.
///
/// Rows of `t2t ⊕ t2v` that do not sum to one within [`ROW_SUM_TOLERANCE`]
/// are reported as warnings: traces from real models may include attention
/// to tokens outside the vision and text blocks.
pub fn read_trace(dir: &Path) -> Result<LoadedTrace> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: TraceManifest =
        serde_json::from_str(&text).map_err(|e| Error::trace(&path, e.to_string()))?;
    check_manifest(&manifest, &path)?;

    let t = manifest.text_count;
    let mut per_layer = Vec::with_capacity(manifest.num_layers);
    let mut warnings = Vec::new();
    for entry in &manifest.layers {
        let v = entry.vision_count;
        let t2t = read_block(dir, &entry.t2t, t, t)?;
        let t2v = read_block(dir, &entry.t2v, t, v)?;
        for row in 0..t {
            let s: f64 = t2t.row(row).iter().chain(t2v.row(row)).sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                log::warn!(
                    "{}: layer {} row {row} sums to {s:.6}",
                    dir.display(),
                    entry.layer_index
                );
                warnings.push(TraceWarning {
                    layer_index: entry.layer_index,
                    row,
                    row_sum: s,
                });
            }
        }
        per_layer.push(LayerAttention {
            layer_index: entry.layer_index,
            t2t,
            t2v,
            vision_ids: entry.vision_ids.clone().unwrap_or_else(|| (0..v).collect()),
        });
    }
    let maps = AttentionMaps {
        sample_id: manifest.sample_id.clone(),
        per_layer,
    };
    maps.validate()
        .map_err(|e| Error::trace(&path, e.to_string()))?;
    Ok(LoadedTrace {
        manifest,
        maps,
        warnings,
    })
}

/// Trace directories directly under `root` (those holding a manifest), sorted by name.
pub fn list_traces(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads every trace under `root`.
pub fn read_corpus(root: &Path) -> Result<Vec<AttentionMaps>> {
    list_traces(root)?
        .iter()
        .map(|d| read_trace(d).map(|t| t.maps))
        .collect()
}
