//! C ABI over the `mags` library.
//!
//! Objects cross the boundary as opaque handles created by `*_read`,
//! `*_fit` or `*_load` functions and released with the matching `*_free`.
//! Every fallible call returns a [`MagsStatus`]; on failure a description
//! is available from [`mags_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::{ptr, slice};

use mags::detector::{auroc, calibrate_threshold, proximity_score, Threshold};
use mags::manifold::{fit_manifold, read_manifold, write_manifold, ErrorManifold};
use mags::steering::{correct_activation, step_steer, HeadActivations, PlanFile, SteeringPlan, SteeringUnit};
use mags::trace::{read_dataset, TraceDataset};
use mags::{Error, HeadId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MagsHeadId {
    pub layer: u32,
    pub head: u32,
}

impl From<MagsHeadId> for HeadId {
    fn from(h: MagsHeadId) -> Self {
        HeadId::new(h.layer as usize, h.head as usize)
    }
}

/// Loaded trace dataset.
pub struct MagsDataset {
    inner: TraceDataset,
}

/// Fitted error manifold of one head.
pub struct MagsManifold {
    inner: ErrorManifold,
}

/// Steering plan loaded from a plan file.
pub struct MagsPlan {
    inner: SteeringPlan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MagsStatus {
    match e {
        Error::Io { .. } => MagsStatus::Io,
        Error::Json { .. } | Error::Csv(_) | Error::UnsupportedVersion { .. } | Error::SizeMismatch { .. } | Error::Format(_) | Error::NonFinite { .. } => {
            MagsStatus::Format
        }
        Error::DimensionMismatch { .. } => MagsStatus::DimensionMismatch,
        Error::ZeroDifference(_) | Error::RankDeficient { .. } => MagsStatus::Numerical,
        _ => MagsStatus::InvalidArgument,
    }
}

struct Failure(MagsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MagsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MagsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MagsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            MagsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MagsStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mags_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Reads a trace-store directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mags_dataset_read(path: *const c_char, out: *mut *mut MagsDataset) -> MagsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        store(out, MagsDataset { inner: read_dataset(path)? })
    })
}

/// Number of traces, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mags_dataset_len(ds: *const MagsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Head output dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mags_dataset_head_dim(ds: *const MagsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.head_dim())
}

/// # Safety
/// `ds` must be null or a handle from [`mags_dataset_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mags_dataset_free(ds: *mut MagsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits a rank-`k` manifold for one head on every trace of the dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_fit(
    ds: *const MagsDataset,
    head: MagsHeadId,
    k: usize,
    out: *mut *mut MagsManifold,
) -> MagsStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        store(out, MagsManifold { inner: fit_manifold(&ds.inner, head.into(), k)? })
    })
}

/// Loads `manifold_<layer>_<head>` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_read(dir: *const c_char, head: MagsHeadId, out: *mut *mut MagsManifold) -> MagsStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        store(out, MagsManifold { inner: read_manifold(dir, head.into())? })
    })
}

/// # Safety
/// `m` must be a live manifold handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_write(m: *const MagsManifold, dir: *const c_char) -> MagsStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        Ok(write_manifold(path_arg(dir, "dir")?, &m.inner)?)
    })
}

/// Subspace rank, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live manifold handle.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_rank(m: *const MagsManifold) -> usize {
    m.as_ref().map_or(0, |m| m.inner.rank())
}

/// Head output dimension, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live manifold handle.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_head_dim(m: *const MagsManifold) -> usize {
    m.as_ref().map_or(0, |m| m.inner.head_dim())
}

/// Sets the threshold to percentile `q` of the dataset's correct-trace
/// scores and writes it to `tau`.
///
/// # Safety
/// `m` and `ds` must be live handles; `tau` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_calibrate(m: *mut MagsManifold, ds: *const MagsDataset, q: f64, tau: *mut f64) -> MagsStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("manifold"))?;
        let ds = handle(ds, "dataset")?;
        let t = calibrate_threshold(&m.inner, ds.inner.traces(), q)?;
        m.inner.set_threshold(Some(t));
        if let Some(tau) = tau.as_mut() {
            *tau = t.value;
        }
        Ok(())
    })
}

/// Writes `|B (a - mu_c)|^2` to `out`.
///
/// # Safety
/// `a` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mags_proximity_score(m: *const MagsManifold, a: *const f64, len: usize, out: *mut f64) -> MagsStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        let score = proximity_score(&m.inner, input(a, len, "activation")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = score;
        Ok(())
    })
}

/// Writes `a - alpha B^T B (a - mu_c)` to `out` unconditionally.
///
/// # Safety
/// `a` and `out` must each point to `len` values; they may alias.
#[no_mangle]
pub unsafe extern "C" fn mags_correct(m: *const MagsManifold, alpha: f64, a: *const f64, out: *mut f64, len: usize) -> MagsStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        let unit = SteeringUnit::new(Arc::new(m.inner.clone()), Threshold::fixed(f64::NEG_INFINITY), alpha)?;
        let corrected = correct_activation(&unit, input(a, len, "activation")?)?;
        output(out, len, "out")?.copy_from_slice(&corrected);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a manifold handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mags_manifold_free(m: *mut MagsManifold) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// AUROC with label 1 marking the positive (incorrect) class.
///
/// # Safety
/// `labels` and `scores` must each point to `n` readable values.
#[no_mangle]
pub unsafe extern "C" fn mags_auroc(labels: *const u8, scores: *const f64, n: usize, out: *mut f64) -> MagsStatus {
    guard(|| {
        let labels: Vec<bool> = input(labels, n, "labels")?.iter().map(|&l| l != 0).collect();
        let value = auroc(&labels, input(scores, n, "scores")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = value;
        Ok(())
    })
}

/// Loads a plan file; relative manifold directories resolve against the
/// plan file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mags_plan_load(path: *const c_char, out: *mut *mut MagsPlan) -> MagsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let base = path.parent().map(PathBuf::from).unwrap_or_default();
        store(out, MagsPlan { inner: PlanFile::read(&path)?.load(base)? })
    })
}

/// Number of steering units, or 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn mags_plan_len(plan: *const MagsPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.inner.len())
}

/// One gated steering step. `activations` holds `n_heads` blocks of
/// `head_dim` values, block `i` belonging to `heads[i]`; it is corrected in
/// place. The number of units that fired is written to `fired`.
///
/// # Safety
/// `heads` must point to `n_heads` entries and `activations` to
/// `n_heads * head_dim` values; `fired` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn mags_plan_steer_step(
    plan: *const MagsPlan,
    step: usize,
    heads: *const MagsHeadId,
    n_heads: usize,
    head_dim: usize,
    activations: *mut f64,
    fired: *mut usize,
) -> MagsStatus {
    guard(|| {
        let plan = handle(plan, "plan")?;
        let heads = input(heads, n_heads, "heads")?;
        if head_dim == 0 {
            return Err(Failure(MagsStatus::InvalidArgument, "head_dim must be positive".into()));
        }
        let total = n_heads
            .checked_mul(head_dim)
            .ok_or_else(|| Failure(MagsStatus::InvalidArgument, "size overflow".into()))?;
        let values = output(activations, total, "activations")?;
        let mut map: HeadActivations = heads
            .iter()
            .zip(values.chunks(head_dim))
            .map(|(&h, v)| (HeadId::from(h), v.to_vec()))
            .collect();
        if map.len() != n_heads {
            return Err(Failure(MagsStatus::InvalidArgument, "duplicate head".into()));
        }
        let records = step_steer(&plan.inner, step, &mut map)?;
        for (&h, v) in heads.iter().zip(values.chunks_mut(head_dim)) {
            v.copy_from_slice(&map[&HeadId::from(h)]);
        }
        if let Some(fired) = fired.as_mut() {
            *fired = records.iter().filter(|r| r.fired).count();
        }
        Ok(())
    })
}

/// # Safety
/// `plan` must be null or a plan handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mags_plan_free(plan: *mut MagsPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}
