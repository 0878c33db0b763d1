//! Proximity scoring, threshold calibration, trajectory-level metrics and
//! head selection.
//!
//! The proximity score of an activation `a` is `|B (a - mu_c)|^2`, the squared
//! length of its error-subspace component. A trigger fires when the score is
//! strictly above the head's threshold.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Activation, ErrorManifold};
use crate::trace::{ActivationTrace, HeadId, TraceDataset};

/// Default calibration percentile.
pub const DEFAULT_PERCENTILE: f64 = 99.0;

/// Heads above this held-out AUROC are reported as notable.
pub const NOTABLE_AUROC: f64 = 0.65;

/// Trigger threshold in squared-norm units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// Percentile the value was calibrated at; `None` for fixed thresholds.
    pub percentile: Option<f64>,
    pub n_calibration_steps: usize,
}

impl Threshold {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            percentile: None,
            n_calibration_steps: 0,
        }
    }

    /// A threshold nothing can exceed; steering with it is a no-op.
    pub fn disabled() -> Self {
        Self::fixed(f64::INFINITY)
    }
}

/// Reduction of per-step scores to one trajectory score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// `|B (a - mu_c)|^2`. One `k x d` product, no allocation.
#[inline]
pub fn proximity_score<T: Activation>(manifold: &ErrorManifold, a: &[T]) -> Result<f64> {
    manifold.check_dim(a.len())?;
    Ok(proximity_unchecked(manifold, a))
}

#[inline]
pub(crate) fn proximity_unchecked<T: Activation>(manifold: &ErrorManifold, a: &[T]) -> f64 {
    (0..manifold.rank())
        .map(|j| {
            let c = manifold.coordinate(j, a);
            c * c
        })
        .sum()
}

/// Per-step proximity scores of the manifold's head along a trace.
pub fn score_trace(manifold: &ErrorManifold, trace: &ActivationTrace) -> Result<Vec<f64>> {
    manifold.check_dim(trace.head_dim())?;
    Ok(trace
        .head_rows(manifold.head())?
        .map(|row| proximity_unchecked(manifold, row))
        .collect())
}

pub fn aggregate(scores: &[f64], mode: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("score sequence"));
    }
    Ok(match mode {
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// `q`-th percentile (`0 <= q <= 100`) with linear interpolation at rank
/// `1 + (q / 100)(n - 1)` of the ascending sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let n = sorted.len();
    let pos = (q / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Calibrates the trigger threshold as the `q`-th percentile of all per-step
/// scores of the correct traces in `traces`. Incorrect traces are ignored.
pub fn calibrate_threshold<'a>(
    manifold: &ErrorManifold,
    traces: impl IntoIterator<Item = &'a ActivationTrace>,
    q: f64,
) -> Result<Threshold> {
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must lie in (0, 100), got {q}")));
    }
    let mut pooled = Vec::new();
    for t in traces.into_iter().filter(|t| t.label().is_correct()) {
        pooled.extend(score_trace(manifold, t)?);
    }
    if pooled.is_empty() {
        return Err(Error::NoCorrectTraces);
    }
    Ok(Threshold {
        value: percentile(&pooled, q)?,
        percentile: Some(q),
        n_calibration_steps: pooled.len(),
    })
}

#[inline]
pub fn is_triggered(score: f64, threshold: &Threshold) -> bool {
    score > threshold.value
}

fn check_binary(labels: &[bool], scores: &[f64]) -> Result<(u64, u64)> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    match (pos, neg) {
        (0, 0) => Err(Error::Empty("labels")),
        (0, _) => Err(Error::SingleClass("negatives")),
        (_, 0) => Err(Error::SingleClass("positives")),
        _ => Ok((pos, neg)),
    }
}

/// Sorted `(score, is_positive)` grouped into runs of equal score:
/// `(score, positives, negatives)` ascending.
fn tie_groups(labels: &[bool], scores: &[f64]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, labels[i] as u64, (!labels[i]) as u64)),
        }
    }
    groups
}

/// Exact AUROC as the ratio `(2 * wins + ties) / (2 * n_pos * n_neg)`.
pub fn auroc_counts(labels: &[bool], scores: &[f64]) -> Result<(u64, u64)> {
    let (pos, neg) = check_binary(labels, scores)?;
    let mut twice_wins = 0u64;
    let mut neg_below = 0u64;
    for (_, p, n) in tie_groups(labels, scores) {
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok((twice_wins, 2 * pos * neg))
}

/// Probability that a random positive (incorrect trace) outscores a random
/// negative, ties counting one half.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (num, den) = auroc_counts(labels, scores)?;
    Ok(num as f64 / den as f64)
}

/// Classification threshold chosen by balanced accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedThreshold {
    pub threshold: f64,
    pub balanced_accuracy: f64,
}

/// Balanced accuracy of the rule `score > threshold => positive`.
pub fn balanced_accuracy_at(labels: &[bool], scores: &[f64], threshold: f64) -> Result<f64> {
    let (pos, neg) = check_binary(labels, scores)?;
    let tp = labels.iter().zip(scores).filter(|(&l, &s)| l && s > threshold).count() as f64;
    let tn = labels.iter().zip(scores).filter(|(&l, &s)| !l && s <= threshold).count() as f64;
    Ok(0.5 * (tp / pos as f64 + tn / neg as f64))
}

/// Sweeps `-inf`, the midpoints of consecutive distinct scores, and `+inf`;
/// returns the smallest threshold attaining the best balanced accuracy.
pub fn balanced_accuracy_threshold(labels: &[bool], scores: &[f64]) -> Result<BalancedThreshold> {
    let (pos, neg) = check_binary(labels, scores)?;
    let groups = tie_groups(labels, scores);

    // Candidate i sits just above groups[..i]: everything in groups[i..] is
    // predicted positive. Compare tp * neg + tn * pos exactly.
    let mut best_key = pos * neg; // threshold -inf: tp = pos, tn = 0
    let mut best_threshold = f64::NEG_INFINITY;
    let (mut pos_le, mut neg_le) = (0u64, 0u64);
    for (i, &(s, p, n)) in groups.iter().enumerate() {
        pos_le += p;
        neg_le += n;
        let key = (pos - pos_le) * neg + neg_le * pos;
        if key > best_key {
            best_key = key;
            best_threshold = match groups.get(i + 1) {
                Some(&(next, _, _)) => s + (next - s) / 2.0,
                None => f64::INFINITY,
            };
        }
    }
    Ok(BalancedThreshold {
        threshold: best_threshold,
        balanced_accuracy: best_key as f64 / (2 * pos * neg) as f64,
    })
}

/// Aggregated score per trace, paired with the positive (incorrect) flag.
pub fn trajectory_scores(
    manifold: &ErrorManifold,
    traces: &[ActivationTrace],
    mode: Aggregation,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(traces.len());
    let mut scores = Vec::with_capacity(traces.len());
    for t in traces {
        labels.push(t.label().is_error());
        scores.push(aggregate(&score_trace(manifold, t)?, mode)?);
    }
    Ok((labels, scores))
}

/// Held-out detection quality of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScorecard {
    pub head: HeadId,
    pub auroc: f64,
    /// Percentile trigger threshold calibrated on training correct traces.
    pub threshold: Threshold,
    /// Balanced accuracy on the test traces at [`Self::classification_threshold`].
    pub balanced_accuracy: f64,
    /// Trajectory-score cut fitted on the training traces.
    pub classification_threshold: f64,
    pub aggregation: Aggregation,
}

impl HeadScorecard {
    pub fn is_notable(&self) -> bool {
        self.auroc > NOTABLE_AUROC
    }
}

/// Scores `manifold` on held-out problems.
///
/// `train` must hold the problems the manifold was fitted on and `test` must
/// hold disjoint problems; both thresholds are fitted on `train`, AUROC and
/// balanced accuracy are measured on `test`.
pub fn evaluate_head(
    manifold: &ErrorManifold,
    train: &TraceDataset,
    test: &TraceDataset,
    aggregation: Aggregation,
    q: f64,
) -> Result<HeadScorecard> {
    let train_ids: std::collections::HashSet<&str> =
        train.traces().iter().map(|t| t.meta.problem_id.as_str()).collect();
    if let Some(t) = test.traces().iter().find(|t| train_ids.contains(t.meta.problem_id.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "problem {} appears in both training and test data",
            t.meta.problem_id
        )));
    }
    let threshold = calibrate_threshold(manifold, train.traces(), q)?;
    let (train_labels, train_scores) = trajectory_scores(manifold, train.traces(), aggregation)?;
    let cut = balanced_accuracy_threshold(&train_labels, &train_scores)?;
    let (labels, scores) = trajectory_scores(manifold, test.traces(), aggregation)?;
    Ok(HeadScorecard {
        head: manifold.head(),
        auroc: auroc(&labels, &scores)?,
        threshold,
        balanced_accuracy: balanced_accuracy_at(&labels, &scores, cut.threshold)?,
        classification_threshold: cut.threshold,
        aggregation,
    })
}

/// Top-`k` heads by AUROC, descending; ties go to the lower `(layer, head)`.
pub fn select_heads(scorecards: &[HeadScorecard], k: usize) -> Result<Vec<HeadId>> {
    if k == 0 || k > scorecards.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} heads from {} scorecards",
            scorecards.len()
        )));
    }
    let mut ranked: Vec<&HeadScorecard> = scorecards.iter().collect();
    ranked.sort_by(|a, b| b.auroc.total_cmp(&a.auroc).then(a.head.cmp(&b.head)));
    Ok(ranked.into_iter().take(k).map(|s| s.head).collect())
}

/// One row of the per-trace score export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceScoreRow {
    pub trace_id: String,
    pub problem_id: String,
    pub label: u8,
    pub agg_score: f64,
    /// Number of steps whose score exceeded the trigger threshold.
    pub triggered_steps: usize,
}

pub fn score_rows(
    manifold: &ErrorManifold,
    traces: &[ActivationTrace],
    aggregation: Aggregation,
    threshold: &Threshold,
) -> Result<Vec<TraceScoreRow>> {
    traces
        .iter()
        .map(|t| {
            let scores = score_trace(manifold, t)?;
            Ok(TraceScoreRow {
                trace_id: t.meta.trace_id.clone(),
                problem_id: t.meta.problem_id.clone(),
                label: t.label().into(),
                agg_score: aggregate(&scores, aggregation)?,
                triggered_steps: scores.iter().filter(|&&s| is_triggered(s, threshold)).count(),
            })
        })
        .collect()
}

pub fn write_score_csv<W: Write>(out: W, rows: &[TraceScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("score csv", e))
}

/// Row of the scorecard export: `layer,head,auroc,threshold,q,balanced_accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorecardRow {
    pub layer: usize,
    pub head: usize,
    pub auroc: f64,
    pub threshold: f64,
    pub q: Option<f64>,
    pub balanced_accuracy: f64,
}

impl From<&HeadScorecard> for ScorecardRow {
    fn from(s: &HeadScorecard) -> Self {
        ScorecardRow {
            layer: s.head.layer,
            head: s.head.head,
            auroc: s.auroc,
            threshold: s.threshold.value,
            q: s.threshold.percentile,
            balanced_accuracy: s.balanced_accuracy,
        }
    }
}

pub fn write_scorecard_csv<W: Write>(out: W, scorecards: &[HeadScorecard]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in scorecards {
        w.serialize(ScorecardRow::from(s))?;
    }
    w.flush().map_err(|e| Error::io("scorecard csv", e))
}

pub fn read_scorecard_csv<R: Read>(input: R) -> Result<Vec<ScorecardRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
