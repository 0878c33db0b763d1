//! On-disk dataset layout: `manifest.json` plus `activations.bin`.
//!
//! The blob is a headerless concatenation of little-endian IEEE-754 `f32`
//! values ordered `[trace][step][monitored head][component]`, traces in
//! manifest order. Each manifest entry records the byte offset of its trace.
//! The blob length must equal `sum(length) * |monitored_heads| * head_dim * 4`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationTrace, HeadId, Label, ModelDims, TraceDataset, TraceMeta};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "activations.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: ModelDims,
    pub monitored_heads: Vec<HeadId>,
    pub traces: Vec<ManifestTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTrace {
    pub problem_id: String,
    pub trace_id: String,
    pub label: Label,
    pub length: usize,
    pub offset_bytes: u64,
}

impl Manifest {
    pub fn for_dataset(dataset: &TraceDataset) -> Manifest {
        let row_bytes = (dataset.monitored_heads().len() * dataset.head_dim() * 4) as u64;
        let mut offset = 0u64;
        let traces = dataset
            .traces()
            .iter()
            .map(|t| {
                let entry = ManifestTrace {
                    problem_id: t.meta.problem_id.clone(),
                    trace_id: t.meta.trace_id.clone(),
                    label: t.meta.label,
                    length: t.meta.length,
                    offset_bytes: offset,
                };
                offset += t.meta.length as u64 * row_bytes;
                entry
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            dims: dataset.dims(),
            monitored_heads: dataset.monitored_heads().to_vec(),
            traces,
        }
    }
}

/// Writes `dataset` into directory `dir`, creating it if needed.
pub fn write_dataset(dataset: &TraceDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for t in dataset.traces() {
        if let Some(step) = t.first_non_finite_step() {
            return Err(Error::NonFinite {
                trace_id: t.meta.trace_id.clone(),
                step,
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let blob_path = dir.join(BLOB_FILE);
    let file = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = BufWriter::new(file);
    for t in dataset.traces() {
        for v in t.values() {
            out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&blob_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&blob_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = Manifest::for_dataset(dataset);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    // Peek at the version first so a future layout reports the right error.
    #[derive(Deserialize)]
    struct Versioned {
        format_version: u32,
    }
    let v: Versioned = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
    if v.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: v.format_version,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))
}

/// Reads a dataset directory written by [`write_dataset`] (or any conforming producer).
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<TraceDataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let heads: std::sync::Arc<[HeadId]> = manifest.monitored_heads.clone().into();
    let head_dim = manifest.dims.head_dim;
    let row_bytes = (heads.len() * head_dim * 4) as u64;
    let expected: u64 = manifest.traces.iter().map(|t| t.length as u64 * row_bytes).sum();
    if blob.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            what: BLOB_FILE.to_owned(),
            expected,
            found: blob.len() as u64,
        });
    }

    let mut offset = 0u64;
    let mut traces = Vec::with_capacity(manifest.traces.len());
    for entry in manifest.traces {
        if entry.offset_bytes != offset {
            return Err(Error::Format(format!(
                "trace {} declares offset {} but its data starts at {}",
                entry.trace_id, entry.offset_bytes, offset
            )));
        }
        let nbytes = entry.length as u64 * row_bytes;
        let bytes = &blob[offset as usize..(offset + nbytes) as usize];
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += nbytes;

        let meta = TraceMeta {
            problem_id: entry.problem_id,
            trace_id: entry.trace_id,
            label: entry.label,
            length: entry.length,
        };
        let trace = ActivationTrace::new(meta, heads.clone(), head_dim, values)?;
        if let Some(step) = trace.first_non_finite_step() {
            return Err(Error::NonFinite {
                trace_id: trace.meta.trace_id,
                step,
            });
        }
        traces.push(trace);
    }
    TraceDataset::new(manifest.dims, manifest.monitored_heads, traces)
}
