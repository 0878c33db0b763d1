//! Contrastive error manifolds.
//!
//! For one head, every usable problem contributes a difference vector
//! `mean(incorrect steps) - mean(correct steps)`. Stacking those gives the
//! difference matrix `D`; its top-k right singular vectors span the error
//! subspace. The manifold pairs that basis with the token-weighted mean of all
//! correct-trace activations, which serves as the centering point at decode
//! time.
//!
//! Means are accumulated in `f64`. The fitted basis and centroid are narrowed
//! to `f32`, the precision they are stored with on disk, so a manifold read
//! back from a file is identical to the one that was fitted.

mod io;

use nalgebra::DMatrix;

use crate::detector::Threshold;
use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, HeadId, Label, TraceDataset};

pub use io::{list_manifolds, manifold_stem, read_manifold, write_manifold, ManifoldHeader};

/// Default subspace rank.
pub const DEFAULT_RANK: usize = 4;

/// Singular values below this make the requested rank unusable.
pub const MIN_SINGULAR_VALUE: f64 = 1e-10;

/// Orthonormal error basis plus correct-state centroid for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorManifold {
    head: HeadId,
    head_dim: usize,
    /// `k x head_dim`, row-major, rows orthonormal.
    basis: Vec<f32>,
    centroid: Vec<f32>,
    singular_values: Vec<f64>,
    threshold: Option<Threshold>,
}

impl ErrorManifold {
    pub fn new(head: HeadId, basis: Vec<f32>, centroid: Vec<f32>, singular_values: Vec<f64>) -> Result<Self> {
        let head_dim = centroid.len();
        let k = singular_values.len();
        if head_dim == 0 || k == 0 || k > head_dim {
            return Err(Error::InvalidArgument(format!(
                "rank {k} invalid for head dimension {head_dim}"
            )));
        }
        if basis.len() != k * head_dim {
            return Err(Error::DimensionMismatch {
                expected: k * head_dim,
                found: basis.len(),
            });
        }
        if basis.iter().chain(&centroid).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("manifold contains non-finite values".into()));
        }
        Ok(Self {
            head,
            head_dim,
            basis,
            centroid,
            singular_values,
            threshold: None,
        })
    }

    pub fn head(&self) -> HeadId {
        self.head
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    pub fn basis_row(&self, j: usize) -> &[f32] {
        &self.basis[j * self.head_dim..(j + 1) * self.head_dim]
    }

    pub fn centroid(&self) -> &[f32] {
        &self.centroid
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Calibrated trigger threshold, once one has been attached.
    pub fn threshold(&self) -> Option<&Threshold> {
        self.threshold.as_ref()
    }

    pub fn set_threshold(&mut self, threshold: Option<Threshold>) {
        self.threshold = threshold;
    }

    pub fn with_threshold(mut self, threshold: Threshold) -> Self {
        self.threshold = Some(threshold);
        self
    }

    /// Coordinates `B (a - mu_c)` of an activation in the error subspace.
    pub fn coordinates<T: Activation>(&self, a: &[T]) -> Result<Vec<f64>> {
        self.check_dim(a.len())?;
        Ok((0..self.rank()).map(|j| self.coordinate(j, a)).collect())
    }

    /// `<B_j, a - mu_c>`, no allocation.
    #[inline]
    pub(crate) fn coordinate<T: Activation>(&self, j: usize, a: &[T]) -> f64 {
        self.basis_row(j)
            .iter()
            .zip(&self.centroid)
            .zip(a)
            .map(|((&b, &c), &x)| b as f64 * (x.to_f64() - c as f64))
            .sum()
    }

    /// Dense `d x d` projector `B^T B` in `f64`.
    pub fn projector(&self) -> Vec<f64> {
        projector(&self.basis, self.rank(), self.head_dim)
    }

    /// Largest entry of `|B B^T - I_k|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.rank();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = self
                    .basis_row(i)
                    .iter()
                    .zip(self.basis_row(j))
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim,
                found,
            });
        }
        Ok(())
    }
}

/// Scalar types an activation vector may be supplied in.
pub trait Activation: Copy {
    fn to_f64(self) -> f64;
}

impl Activation for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Activation for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `B^T B` for a row-major `k x d` basis.
pub fn projector<T: Activation>(basis: &[T], k: usize, d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d * d];
    for j in 0..k {
        let row = &basis[j * d..(j + 1) * d];
        for (r, &x) in row.iter().enumerate() {
            for (c, &y) in row.iter().enumerate() {
                p[r * d + c] += x.to_f64() * y.to_f64();
            }
        }
    }
    p
}

fn accumulate<'a>(traces: impl Iterator<Item = &'a ActivationTrace>, head: HeadId, d: usize) -> Result<(Vec<f64>, usize)> {
    let mut sum = vec![0.0f64; d];
    let mut steps = 0usize;
    for t in traces {
        for row in t.head_rows(head)? {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
            steps += 1;
        }
    }
    Ok((sum, steps))
}

fn mean_of<'a>(traces: impl Iterator<Item = &'a ActivationTrace>, head: HeadId, d: usize) -> Result<Option<Vec<f64>>> {
    let (mut sum, steps) = accumulate(traces, head, d)?;
    if steps == 0 {
        return Ok(None);
    }
    let n = steps as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(Some(sum))
}

/// Token-weighted per-class means `(mu_correct, mu_error)` for one problem.
///
/// Steps of all traces of a class are pooled, so a long trace weighs more than
/// a short one.
pub fn class_means(problem_traces: &[&ActivationTrace], head: HeadId) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = problem_traces.first().ok_or(Error::Empty("problem traces"))?;
    let problem_id = &first.meta.problem_id;
    if problem_traces.iter().any(|t| &t.meta.problem_id != problem_id) {
        return Err(Error::InvalidArgument("class_means expects traces of one problem".into()));
    }
    let d = first.head_dim();
    let of = |label: Label| problem_traces.iter().copied().filter(move |t| t.label() == label);
    let correct = mean_of(of(Label::Correct), head, d)?.ok_or_else(|| Error::AssumptionViolated {
        problem_id: problem_id.clone(),
        missing: "correct",
    })?;
    let error = mean_of(of(Label::Incorrect), head, d)?.ok_or_else(|| Error::AssumptionViolated {
        problem_id: problem_id.clone(),
        missing: "incorrect",
    })?;
    Ok((correct, error))
}

/// `mu_error - mu_correct` for one problem.
pub fn difference_vector(problem_traces: &[&ActivationTrace], head: HeadId) -> Result<Vec<f64>> {
    let (correct, error) = class_means(problem_traces, head)?;
    Ok(error.iter().zip(&correct).map(|(e, c)| e - c).collect())
}

/// Stacked per-problem difference vectors for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    pub head: HeadId,
    pub head_dim: usize,
    /// `n x head_dim`, row-major, one row per retained problem.
    pub rows: Vec<f64>,
    pub retained_problem_ids: Vec<String>,
    /// Problems lacking one of the two classes.
    pub skipped_problem_ids: Vec<String>,
}

impl DifferenceMatrix {
    pub fn n_rows(&self) -> usize {
        self.retained_problem_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.head_dim..(i + 1) * self.head_dim]
    }
}

pub fn build_difference_matrix(dataset: &TraceDataset, head: HeadId) -> Result<DifferenceMatrix> {
    if !dataset.monitored_heads().contains(&head) {
        return Err(Error::UnknownHead(head));
    }
    let d = dataset.head_dim();
    let mut rows = Vec::new();
    let mut retained = Vec::new();
    let mut skipped = Vec::new();
    for group in dataset.problems() {
        match difference_vector(&group.traces, head) {
            Ok(delta) => {
                rows.extend(delta);
                retained.push(group.problem_id.to_owned());
            }
            Err(Error::AssumptionViolated { problem_id, missing }) => {
                log::warn!("head {head}: skipping problem {problem_id} (no {missing} trace)");
                skipped.push(problem_id);
            }
            Err(e) => return Err(e),
        }
    }
    if retained.is_empty() {
        return Err(Error::NoUsableProblems(head));
    }
    Ok(DifferenceMatrix {
        head,
        head_dim: d,
        rows,
        retained_problem_ids: retained,
        skipped_problem_ids: skipped,
    })
}

/// Top-k right singular vectors of a difference matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSubspace {
    /// `k x head_dim`, row-major, rows orthonormal.
    pub basis: Vec<f32>,
    /// Leading `k` singular values, descending.
    pub singular_values: Vec<f64>,
}

/// Fits the rank-`k` error basis from `D` as stacked (no re-centering).
///
/// Each basis row is sign-normalized so that its first entry of largest
/// magnitude is positive.
pub fn fit_error_subspace(diff: &DifferenceMatrix, k: usize) -> Result<ErrorSubspace> {
    let n = diff.n_rows();
    let d = diff.head_dim;
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "rank k={k} must lie in [1, {}] for a {n}x{d} difference matrix",
            n.min(d)
        )));
    }
    if diff.rows.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroDifference(diff.head));
    }
    let m = DMatrix::from_row_slice(n, d, &diff.rows);
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Format("SVD did not produce right singular vectors".into()))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let singular_values: Vec<f64> = order[..k].iter().map(|&i| svd.singular_values[i]).collect();
    let sigma_k = singular_values[k - 1];
    if sigma_k < MIN_SINGULAR_VALUE {
        return Err(Error::RankDeficient { k, sigma: sigma_k });
    }

    let mut basis = Vec::with_capacity(k * d);
    for &i in &order[..k] {
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        canonicalize_sign(&mut row);
        basis.extend(row.iter().map(|&v| v as f32));
    }
    Ok(ErrorSubspace { basis, singular_values })
}

fn canonicalize_sign(row: &mut [f64]) {
    let mut pivot = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[pivot].abs() {
            pivot = i;
        }
    }
    if row[pivot] < 0.0 {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Token-weighted mean over every step of every correct trace.
pub fn global_centroid(dataset: &TraceDataset, head: HeadId) -> Result<Vec<f64>> {
    if !dataset.monitored_heads().contains(&head) {
        return Err(Error::UnknownHead(head));
    }
    mean_of(dataset.correct_traces(), head, dataset.head_dim())?.ok_or(Error::NoCorrectTraces)
}

/// Fits the manifold of `head` from every trace in `dataset`.
///
/// Pass only training problems (see [`TraceDataset::restrict`]).
pub fn fit_manifold(dataset: &TraceDataset, head: HeadId, k: usize) -> Result<ErrorManifold> {
    let diff = build_difference_matrix(dataset, head)?;
    let subspace = fit_error_subspace(&diff, k)?;
    let centroid = global_centroid(dataset, head)?;
    ErrorManifold::new(
        head,
        subspace.basis,
        centroid.iter().map(|&v| v as f32).collect(),
        subspace.singular_values,
    )
}

/// Principal angles (radians, ascending) between the row spaces of two
/// orthonormal row-major bases of width `d`.
pub fn principal_angles<A: Activation, B: Activation>(a: &[A], b: &[B], d: usize) -> Vec<f64> {
    let ka = a.len() / d;
    let kb = b.len() / d;
    let m = DMatrix::from_fn(ka, kb, |i, j| {
        (0..d).map(|c| a[i * d + c].to_f64() * b[j * d + c].to_f64()).sum::<f64>()
    });
    let mut cosines: Vec<f64> = m.singular_values().iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    cosines.into_iter().map(f64::acos).collect()
}
