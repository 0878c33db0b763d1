//! Manifold file pair: `manifold_<l>_<h>.json` (header) and
//! `manifold_<l>_<h>.bin` (row-major little-endian `f32`: basis rows, then
//! the centroid).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ErrorManifold;
use crate::detector::Threshold;
use crate::error::{Error, Result};
use crate::trace::HeadId;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldHeader {
    pub format_version: u32,
    pub head: HeadId,
    pub k: usize,
    pub head_dim: usize,
    pub singular_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_calibration_steps: Option<usize>,
}

pub fn manifold_stem(head: HeadId) -> String {
    format!("manifold_{}_{}", head.layer, head.head)
}

fn paths(dir: &Path, head: HeadId) -> (PathBuf, PathBuf) {
    let stem = manifold_stem(head);
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn write_manifold(dir: impl AsRef<Path>, manifold: &ErrorManifold) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, bin_path) = paths(dir, manifold.head());

    let threshold = manifold.threshold();
    let header = ManifoldHeader {
        format_version: FORMAT_VERSION,
        head: manifold.head(),
        k: manifold.rank(),
        head_dim: manifold.head_dim(),
        singular_values: manifold.singular_values().to_vec(),
        tau: threshold.map(|t| t.value),
        q: threshold.and_then(|t| t.percentile),
        n_calibration_steps: threshold.map(|t| t.n_calibration_steps),
    };
    if header.tau.is_some_and(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("only finite thresholds can be stored with a manifold".into()));
    }
    let mut json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    json.push(b'\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let bytes: Vec<u8> = manifold
        .basis()
        .iter()
        .chain(manifold.centroid())
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn read_manifold(dir: impl AsRef<Path>, head: HeadId) -> Result<ErrorManifold> {
    let (json_path, bin_path) = paths(dir.as_ref(), head);
    let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: ManifoldHeader = serde_json::from_slice(&text).map_err(|e| Error::json(&json_path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if header.head != head {
        return Err(Error::Format(format!("{} describes head {}", json_path.display(), header.head)));
    }
    if header.singular_values.len() != header.k {
        return Err(Error::Format(format!(
            "{}: k = {} but {} singular values",
            json_path.display(),
            header.k,
            header.singular_values.len()
        )));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = ((header.k + 1) * header.head_dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            what: bin_path.display().to_string(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let centroid = values.split_off(header.k * header.head_dim);
    let mut m = ErrorManifold::new(head, values, centroid, header.singular_values)?;
    if let Some(value) = header.tau {
        m.set_threshold(Some(Threshold {
            value,
            percentile: header.q,
            n_calibration_steps: header.n_calibration_steps.unwrap_or(0),
        }));
    }
    Ok(m)
}

/// Heads with a manifold header in `dir`, sorted by `(layer, head)`.
pub fn list_manifolds(dir: impl AsRef<Path>) -> Result<Vec<HeadId>> {
    let dir = dir.as_ref();
    let mut heads = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(rest) = name.to_str().and_then(|n| n.strip_prefix("manifold_")).and_then(|n| n.strip_suffix(".json")) else {
            continue;
        };
        if let Some((l, h)) = rest.split_once('_') {
            if let (Ok(l), Ok(h)) = (l.parse(), h.parse()) {
                heads.push(HeadId::new(l, h));
            }
        }
    }
    heads.sort();
    Ok(heads)
}
