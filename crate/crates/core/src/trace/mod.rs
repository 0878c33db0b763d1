//! Activation traces: the labeled per-head activation sequences every other
//! stage consumes.
//!
//! A [`TraceDataset`] holds many [`ActivationTrace`]s grouped by problem.
//! Each trace stores a dense `[step][monitored head][component]` block of
//! `f32` values, which is also the on-disk order used by [`store`].

mod split;
pub mod store;
mod validate;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{split_by_problem, ProblemSplit};
pub use store::{read_dataset, write_dataset};
pub use validate::{validate_dataset, NonFiniteEntry, ProblemFlag, ProblemReport, ValidationReport};

/// An attention head, addressed by `(layer, head)`.
///
/// Serialized as the two-element array `[layer, head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<[usize; 2]> for HeadId {
    fn from([layer, head]: [usize; 2]) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for [usize; 2] {
    fn from(h: HeadId) -> Self {
        [h.layer, h.head]
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    /// Parses `"layer:head"` or `"layer,head"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse head id {s:?}, expected layer:head"));
        let (l, h) = s.split_once([':', ',']).ok_or_else(bad)?;
        Ok(HeadId::new(
            l.trim().parse().map_err(|_| bad())?,
            h.trim().parse().map_err(|_| bad())?,
        ))
    }
}

/// Trace-level correctness label. Encoded as `1` (correct) / `0` (incorrect).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Incorrect,
    Correct,
}

impl Label {
    pub fn is_correct(self) -> bool {
        self == Label::Correct
    }

    /// Positive class for detection metrics: an incorrect trace.
    pub fn is_error(self) -> bool {
        self == Label::Incorrect
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Incorrect),
            1 => Ok(Label::Correct),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Incorrect => 0,
            Label::Correct => 1,
        }
    }
}

/// Model geometry the traces were captured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ModelDims {
    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.layers && head.head < self.heads
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub problem_id: String,
    pub trace_id: String,
    pub label: Label,
    /// Number of decode steps (rows) in every activation matrix of the trace.
    pub length: usize,
}

/// One generated sequence's activations for a fixed set of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub meta: TraceMeta,
    heads: Arc<[HeadId]>,
    head_dim: usize,
    values: Vec<f32>,
}

impl ActivationTrace {
    /// `values` is laid out `[step][head][component]`.
    pub fn new(meta: TraceMeta, heads: Arc<[HeadId]>, head_dim: usize, values: Vec<f32>) -> Result<Self> {
        if meta.length == 0 {
            return Err(Error::InvalidArgument(format!(
                "trace {} has zero length",
                meta.trace_id
            )));
        }
        let expected = meta.length * heads.len() * head_dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            meta,
            heads,
            head_dim,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.length
    }

    pub fn is_empty(&self) -> bool {
        self.meta.length == 0
    }

    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn label(&self) -> Label {
        self.meta.label
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn head_index(&self, head: HeadId) -> Option<usize> {
        self.heads.iter().position(|&h| h == head)
    }

    /// Activation of the `slot`-th monitored head at `step`.
    pub fn activation(&self, step: usize, slot: usize) -> &[f32] {
        let start = (step * self.heads.len() + slot) * self.head_dim;
        &self.values[start..start + self.head_dim]
    }

    /// Per-step activations of one head, in step order.
    pub fn head_rows(&self, head: HeadId) -> Result<impl Iterator<Item = &[f32]> + '_> {
        let slot = self.head_index(head).ok_or(Error::UnknownHead(head))?;
        Ok((0..self.len()).map(move |t| self.activation(t, slot)))
    }

    /// First step holding a NaN or infinity, if any.
    pub fn first_non_finite_step(&self) -> Option<usize> {
        let row = self.heads.len() * self.head_dim;
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| i / row.max(1))
    }
}

/// Traces belonging to one problem, in dataset order.
#[derive(Debug, Clone)]
pub struct ProblemGroup<'a> {
    pub problem_id: &'a str,
    pub traces: Vec<&'a ActivationTrace>,
}

impl ProblemGroup<'_> {
    pub fn count(&self, label: Label) -> usize {
        self.traces.iter().filter(|t| t.label() == label).count()
    }
}

/// A collection of labeled traces sharing one set of monitored heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    dims: ModelDims,
    monitored_heads: Arc<[HeadId]>,
    traces: Vec<ActivationTrace>,
}

impl TraceDataset {
    /// Builds a dataset, checking structural invariants.
    ///
    /// Non-finite values are accepted here; [`validate_dataset`] reports them
    /// and [`write_dataset`] refuses to persist them.
    pub fn new(dims: ModelDims, monitored_heads: Vec<HeadId>, traces: Vec<ActivationTrace>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &h in &monitored_heads {
            if !dims.contains(h) {
                return Err(Error::InvalidArgument(format!(
                    "monitored head {h} outside model dims {}x{}",
                    dims.layers, dims.heads
                )));
            }
            if !seen.insert(h) {
                return Err(Error::InvalidArgument(format!("head {h} monitored twice")));
            }
        }
        let monitored_heads: Arc<[HeadId]> = monitored_heads.into();
        let mut ids = HashSet::new();
        for t in &traces {
            if *t.heads != *monitored_heads {
                return Err(Error::InvalidArgument(format!(
                    "trace {} monitors a different head set",
                    t.meta.trace_id
                )));
            }
            if t.head_dim != dims.head_dim {
                return Err(Error::DimensionMismatch {
                    expected: dims.head_dim,
                    found: t.head_dim,
                });
            }
            if !ids.insert(t.meta.trace_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate trace id {}",
                    t.meta.trace_id
                )));
            }
        }
        Ok(Self {
            dims,
            monitored_heads,
            traces,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn head_dim(&self) -> usize {
        self.dims.head_dim
    }

    pub fn monitored_heads(&self) -> &[HeadId] {
        &self.monitored_heads
    }

    /// Shared handle to the head list, for building traces that belong here.
    pub fn monitored_heads_arc(&self) -> Arc<[HeadId]> {
        self.monitored_heads.clone()
    }

    pub fn traces(&self) -> &[ActivationTrace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Problem groups ordered by first appearance.
    pub fn problems(&self) -> Vec<ProblemGroup<'_>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<ProblemGroup<'_>> = Vec::new();
        for t in &self.traces {
            let id = t.meta.problem_id.as_str();
            let slot = *index.entry(id).or_insert_with(|| {
                groups.push(ProblemGroup {
                    problem_id: id,
                    traces: Vec::new(),
                });
                groups.len() - 1
            });
            groups[slot].traces.push(t);
        }
        groups
    }

    pub fn problem_ids(&self) -> Vec<String> {
        self.problems().iter().map(|g| g.problem_id.to_owned()).collect()
    }

    /// A copy restricted to the given problems, preserving order.
    pub fn restrict(&self, problem_ids: &BTreeSet<String>) -> TraceDataset {
        TraceDataset {
            dims: self.dims,
            monitored_heads: self.monitored_heads.clone(),
            traces: self
                .traces
                .iter()
                .filter(|t| problem_ids.contains(&t.meta.problem_id))
                .cloned()
                .collect(),
        }
    }

    pub fn correct_traces(&self) -> impl Iterator<Item = &ActivationTrace> {
        self.traces.iter().filter(|t| t.label().is_correct())
    }

    pub fn into_traces(self) -> Vec<ActivationTrace> {
        self.traces
    }

    /// Total number of activation bytes in the on-disk layout.
    pub fn blob_len(&self) -> u64 {
        self.traces
            .iter()
            .map(|t| (t.len() * self.monitored_heads.len() * self.dims.head_dim * 4) as u64)
            .sum()
    }
}
