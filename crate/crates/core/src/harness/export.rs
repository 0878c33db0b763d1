use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeResult;
use crate::detector::{ScorecardRow, NOTABLE_AUROC};
use crate::error::{Error, Result};
use crate::manifold::{Activation, ErrorManifold};
use crate::trace::{ActivationTrace, HeadId, TraceDataset};

/// One step of one trajectory in error-subspace coordinates
/// `p_j = <B_j, a_t - mu_c>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub trace_id: String,
    pub step: usize,
    /// Class label (`correct` / `incorrect`) or a condition such as `steered`.
    pub tag: String,
    pub coords: Vec<f64>,
}

impl TrajectoryRow {
    pub fn distance(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

fn check_dims(manifold: &ErrorManifold, dims: usize) -> Result<()> {
    if dims == 0 || dims > manifold.rank() {
        return Err(Error::InvalidArgument(format!(
            "cannot project onto {dims} coordinates of a rank-{} manifold",
            manifold.rank()
        )));
    }
    Ok(())
}

fn project_rows<'a, T: Activation + 'a>(
    manifold: &ErrorManifold,
    trace_id: &str,
    tag: &str,
    rows: impl Iterator<Item = &'a [T]>,
    dims: usize,
) -> Result<Vec<TrajectoryRow>> {
    check_dims(manifold, dims)?;
    rows.enumerate()
        .map(|(step, a)| {
            let mut coords = manifold.coordinates(a)?;
            coords.truncate(dims);
            Ok(TrajectoryRow {
                trace_id: trace_id.to_owned(),
                step,
                tag: tag.to_owned(),
                coords,
            })
        })
        .collect()
}

pub fn project_trace(manifold: &ErrorManifold, trace: &ActivationTrace, dims: usize) -> Result<Vec<TrajectoryRow>> {
    let tag = if trace.label().is_correct() { "correct" } else { "incorrect" };
    project_rows(manifold, &trace.meta.trace_id, tag, trace.head_rows(manifold.head())?, dims)
}

/// Projects the recorded outputs of the manifold's head from a decode.
pub fn project_decode(
    manifold: &ErrorManifold,
    result: &DecodeResult,
    trace_id: &str,
    tag: &str,
    dims: usize,
) -> Result<Vec<TrajectoryRow>> {
    let rows = result.activations.head_rows(manifold.head())?;
    project_rows(manifold, trace_id, tag, rows.into_iter(), dims)
}

pub fn export_trajectory_projection(manifold: &ErrorManifold, dataset: &TraceDataset, dims: usize) -> Result<Vec<TrajectoryRow>> {
    let mut out = Vec::new();
    for t in dataset.traces() {
        out.extend(project_trace(manifold, t, dims)?);
    }
    Ok(out)
}

/// Mean distance to the centroid over rows at or after `from_step`.
pub fn mean_distance_after(rows: &[TrajectoryRow], from_step: usize) -> Option<f64> {
    let d: Vec<f64> = rows.iter().filter(|r| r.step >= from_step).map(TrajectoryRow::distance).collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// CSV with header `trace_id,step,tag,p1,...,p<dims>`.
pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let dims = rows.first().map_or(0, |r| r.coords.len());
    let mut w = csv::Writer::from_writer(out);
    let header = ["trace_id", "step", "tag"].map(String::from).into_iter().chain((1..=dims).map(|j| format!("p{j}")));
    w.write_record(header)?;
    for r in rows {
        if r.coords.len() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: r.coords.len(),
            });
        }
        let fields = [r.trace_id.clone(), r.step.to_string(), r.tag.clone()]
            .into_iter()
            .chain(r.coords.iter().map(f64::to_string));
        w.write_record(fields)?;
    }
    w.flush().map_err(|e| Error::io("trajectory csv", e))
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |m: &str| Error::Format(format!("trajectory csv: {m}"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(bad("too few columns"));
            }
            Ok(TrajectoryRow {
                trace_id: rec[0].to_owned(),
                step: rec[1].parse().map_err(|_| bad("step is not an integer"))?,
                tag: rec[2].to_owned(),
                coords: rec
                    .iter()
                    .skip(3)
                    .map(|v| v.parse().map_err(|_| bad("coordinate is not a number")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub head: usize,
    pub auroc: f64,
    /// AUROC strictly above the notability cutoff.
    pub notable: bool,
}

/// Layer-by-head AUROC grid, one row per head in `(layer, head)` order.
pub fn export_auroc_heatmap<W: Write>(out: W, scorecards: &[ScorecardRow]) -> Result<Vec<HeatmapRow>> {
    if scorecards.is_empty() {
        return Err(Error::Empty("scorecards"));
    }
    let mut rows: Vec<HeatmapRow> = scorecards
        .iter()
        .map(|s| HeatmapRow {
            layer: s.layer,
            head: s.head,
            auroc: s.auroc,
            notable: s.auroc > NOTABLE_AUROC,
        })
        .collect();
    rows.sort_by_key(|r| HeadId::new(r.layer, r.head));
    let mut w = csv::Writer::from_writer(out);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("heatmap csv", e))?;
    Ok(rows)
}
