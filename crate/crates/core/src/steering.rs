//! Conditional error-component correction.
//!
//! When a head's proximity score exceeds its threshold, its activation is
//! replaced by `a - alpha * B^T B (a - mu_c)`. Only the component inside the
//! error subspace moves; the complement is left exactly as it was, and the
//! proximity score shrinks by the factor `(1 - alpha)^2`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::detector::{is_triggered, proximity_unchecked, Threshold};
use crate::error::{Error, Result};
use crate::manifold::{read_manifold, ErrorManifold};
use crate::trace::HeadId;

pub const DEFAULT_ALPHA: f64 = 1.0;

/// Steering strengths swept in the ablation grid.
pub const ALPHA_SWEEP: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// A manifold, the threshold gating it, and the strength of its correction.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringUnit {
    manifold: Arc<ErrorManifold>,
    threshold: Threshold,
    alpha: f64,
}

impl SteeringUnit {
    pub fn new(manifold: Arc<ErrorManifold>, threshold: Threshold, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if threshold.value.is_nan() {
            return Err(Error::InvalidArgument("threshold is NaN".into()));
        }
        Ok(Self {
            manifold,
            threshold,
            alpha,
        })
    }

    /// Uses the threshold stored with the manifold.
    pub fn from_calibrated(manifold: Arc<ErrorManifold>, alpha: f64) -> Result<Self> {
        let threshold = *manifold.threshold().ok_or_else(|| {
            Error::InvalidArgument(format!("manifold for head {} has no calibrated threshold", manifold.head()))
        })?;
        Self::new(manifold, threshold, alpha)
    }

    pub fn head(&self) -> HeadId {
        self.manifold.head()
    }

    pub fn manifold(&self) -> &ErrorManifold {
        &self.manifold
    }

    pub fn threshold(&self) -> &Threshold {
        &self.threshold
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn correct_in_place(&self, a: &mut [f64]) {
        let m = &*self.manifold;
        let coeffs: Vec<f64> = (0..m.rank()).map(|j| m.coordinate(j, a)).collect();
        for (j, c) in coeffs.into_iter().enumerate() {
            let step = self.alpha * c;
            for (x, &b) in a.iter_mut().zip(m.basis_row(j)) {
                *x -= step * b as f64;
            }
        }
    }
}

/// `a - alpha * B^T B (a - mu_c)`.
pub fn correct_activation(unit: &SteeringUnit, a: &[f64]) -> Result<Vec<f64>> {
    unit.manifold.check_dim(a.len())?;
    let mut out = a.to_vec();
    unit.correct_in_place(&mut out);
    Ok(out)
}

/// `mu_c + (I - B^T B)(a - mu_c)`, the closed form of a full-strength correction.
pub fn correct_activation_projector_form(unit: &SteeringUnit, a: &[f64]) -> Result<Vec<f64>> {
    if unit.alpha != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "projector form requires alpha = 1, got {}",
            unit.alpha
        )));
    }
    let m = &*unit.manifold;
    m.check_dim(a.len())?;
    let d = m.head_dim();
    let p = m.projector();
    let centered: Vec<f64> = a.iter().zip(m.centroid()).map(|(&x, &c)| x - c as f64).collect();
    Ok((0..d)
        .map(|r| {
            let projected: f64 = (0..d).map(|c| p[r * d + c] * centered[c]).sum();
            m.centroid()[r] as f64 + centered[r] - projected
        })
        .collect())
}

/// Checks `<a~, v> == <a, v>` for a `v` in the null space of the basis.
///
/// Meant as a test oracle. Fails with [`Error::NotInNullSpace`] when
/// `|B v| > 1e-8`.
pub fn verify_information_preservation(unit: &SteeringUnit, a: &[f64], v: &[f64]) -> Result<bool> {
    let m = &*unit.manifold;
    m.check_dim(v.len())?;
    let bv: f64 = (0..m.rank())
        .map(|j| {
            let dot: f64 = m.basis_row(j).iter().zip(v).map(|(&b, &x)| b as f64 * x).sum();
            dot * dot
        })
        .sum::<f64>()
        .sqrt();
    if bv > 1e-8 {
        return Err(Error::NotInNullSpace(bv));
    }
    let corrected = correct_activation(unit, a)?;
    let dot = |x: &[f64]| x.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let norm = |x: &[f64]| x.iter().map(|p| p * p).sum::<f64>().sqrt();
    Ok((dot(&corrected) - dot(a)).abs() <= 1e-6 * (1.0 + norm(a) * norm(v)))
}

#[derive(Debug, Clone, PartialEq)]
struct PlanUnit {
    objective: usize,
    unit: SteeringUnit,
}

/// Ordered set of steering units, possibly spanning several objectives.
///
/// Units are kept in `(objective, layer, head)` order and are applied in that
/// order; a head may carry one unit per objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    objectives: Vec<String>,
    units: Vec<PlanUnit>,
}

impl SteeringPlan {
    /// Single-objective plan; at most one unit per head.
    pub fn new(objective: impl Into<String>, units: Vec<SteeringUnit>) -> Result<Self> {
        let mut seen = HashSet::new();
        for u in &units {
            if !seen.insert(u.head()) {
                return Err(Error::InvalidArgument(format!("head {} appears twice in one objective", u.head())));
            }
        }
        let mut units: Vec<PlanUnit> = units.into_iter().map(|unit| PlanUnit { objective: 0, unit }).collect();
        units.sort_by_key(|u| u.unit.head());
        Ok(Self {
            objectives: vec![objective.into()],
            units,
        })
    }

    pub fn empty() -> Self {
        Self {
            objectives: Vec::new(),
            units: Vec::new(),
        }
    }

    pub fn objectives(&self) -> &[String] {
        &self.objectives
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `(objective index, unit)` in application order.
    pub fn units(&self) -> impl Iterator<Item = (usize, &SteeringUnit)> {
        self.units.iter().map(|u| (u.objective, &u.unit))
    }

    /// Distinct heads, sorted.
    pub fn heads(&self) -> Vec<HeadId> {
        let mut heads: Vec<HeadId> = self.units.iter().map(|u| u.unit.head()).collect();
        heads.sort();
        heads.dedup();
        heads
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.units.iter().map(|u| u.unit.head().layer).max()
    }

    /// Same plan with every threshold replaced.
    pub fn with_threshold(&self, threshold: Threshold) -> Self {
        let mut plan = self.clone();
        for u in &mut plan.units {
            u.unit.threshold = threshold;
        }
        plan
    }

    /// Same plan with every alpha replaced.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut plan = self.clone();
        for u in &mut plan.units {
            u.unit = SteeringUnit::new(u.unit.manifold.clone(), u.unit.threshold, alpha)?;
        }
        Ok(plan)
    }
}

/// Union of independently built plans; objective indices follow input order.
///
/// A head selected by several objectives keeps one unit per objective, and
/// those units are applied one after another in objective order.
pub fn compose_union(plans: &[SteeringPlan]) -> SteeringPlan {
    let mut out = SteeringPlan::empty();
    for plan in plans {
        let offset = out.objectives.len();
        out.objectives.extend(plan.objectives.iter().cloned());
        out.units.extend(plan.units.iter().map(|u| PlanUnit {
            objective: u.objective + offset,
            unit: u.unit.clone(),
        }));
    }
    out.units.sort_by_key(|u| (u.objective, u.unit.head()));
    let mut seen = HashSet::new();
    for u in &out.units {
        if !seen.insert(u.unit.head()) {
            log::info!(
                "head {} is steered by several objectives; corrections apply in objective order",
                u.unit.head()
            );
        }
    }
    out
}

/// One unit evaluation at one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub step: usize,
    pub head: HeadId,
    pub objective: usize,
    pub score_pre: f64,
    pub fired: bool,
    /// Score after correction; equals `score_pre` when nothing fired.
    pub score_post: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriggerLog {
    pub records: Vec<TriggerRecord>,
}

#[derive(Serialize)]
struct TriggerCsvRow {
    step: usize,
    layer: usize,
    head: usize,
    objective: usize,
    score_pre: f64,
    fired: bool,
    score_post: f64,
    alpha: f64,
}

impl TriggerLog {
    /// First step at which any unit fired.
    pub fn first_fire(&self) -> Option<usize> {
        self.records.iter().filter(|r| r.fired).map(|r| r.step).min()
    }

    pub fn fired_count(&self) -> usize {
        self.records.iter().filter(|r| r.fired).count()
    }

    /// CSV with header `step,layer,head,objective,score_pre,fired,score_post,alpha`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(TriggerCsvRow {
                step: r.step,
                layer: r.head.layer,
                head: r.head.head,
                objective: r.objective,
                score_pre: r.score_pre,
                fired: r.fired,
                score_post: r.score_post,
                alpha: r.alpha,
            })?;
        }
        w.flush().map_err(|e| Error::io("trigger log csv", e))
    }
}

fn evaluate_unit(objective: usize, unit: &SteeringUnit, step: usize, a: &mut [f64]) -> TriggerRecord {
    let score_pre = proximity_unchecked(&unit.manifold, a);
    let fired = is_triggered(score_pre, &unit.threshold);
    let score_post = if fired {
        unit.correct_in_place(a);
        proximity_unchecked(&unit.manifold, a)
    } else {
        score_pre
    };
    TriggerRecord {
        step,
        head: unit.head(),
        objective,
        score_pre,
        fired,
        score_post,
        alpha: unit.alpha,
    }
}

/// Map from head to its current output.
pub type HeadActivations = BTreeMap<HeadId, Vec<f64>>;

/// One decode step of gated steering over a map of head outputs.
///
/// Each unit is evaluated once, in plan order, against the head's current
/// (possibly already corrected) value. Heads outside the plan are untouched.
pub fn step_steer(plan: &SteeringPlan, step: usize, activations: &mut HeadActivations) -> Result<Vec<TriggerRecord>> {
    for u in &plan.units {
        let a = activations.get(&u.unit.head()).ok_or(Error::UnknownHead(u.unit.head()))?;
        u.unit.manifold.check_dim(a.len())?;
    }
    Ok(plan
        .units
        .iter()
        .map(|u| {
            let a = activations.get_mut(&u.unit.head()).expect("checked above");
            evaluate_unit(u.objective, &u.unit, step, a)
        })
        .collect())
}

/// Steers the concatenated head outputs of one layer in place.
///
/// `heads` holds `H` blocks of `head_dim` values, block `h` belonging to
/// head `(layer, h)`.
pub(crate) fn steer_layer(
    plan: &SteeringPlan,
    step: usize,
    layer: usize,
    head_dim: usize,
    heads: &mut [f64],
    log: &mut Vec<TriggerRecord>,
) {
    for u in plan.units.iter().filter(|u| u.unit.head().layer == layer) {
        let h = u.unit.head().head;
        let a = &mut heads[h * head_dim..(h + 1) * head_dim];
        log.push(evaluate_unit(u.objective, &u.unit, step, a));
    }
}

/// Serialized plan: thresholds and strengths inline, manifolds by directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub format_version: u32,
    pub objectives: Vec<String>,
    pub units: Vec<PlanFileUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFileUnit {
    pub objective: usize,
    pub head: HeadId,
    pub alpha: f64,
    /// `None` disables the unit (threshold `+inf`).
    pub tau: Option<f64>,
    #[serde(default)]
    pub q: Option<f64>,
    /// Directory holding this unit's manifold files.
    pub manifold_dir: PathBuf,
}

impl PlanFile {
    /// Describes `plan`, whose units were loaded from `manifold_dirs[objective]`.
    pub fn describe(plan: &SteeringPlan, manifold_dirs: &[PathBuf]) -> Result<PlanFile> {
        let units = plan
            .units
            .iter()
            .map(|u| {
                let dir = manifold_dirs.get(u.objective).ok_or_else(|| {
                    Error::InvalidArgument(format!("no manifold directory for objective {}", u.objective))
                })?;
                let t = u.unit.threshold;
                Ok(PlanFileUnit {
                    objective: u.objective,
                    head: u.unit.head(),
                    alpha: u.unit.alpha,
                    tau: (t.value != f64::INFINITY).then_some(t.value),
                    q: t.percentile,
                    manifold_dir: dir.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PlanFile {
            format_version: 1,
            objectives: plan.objectives.clone(),
            units,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        json.push(b'\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<PlanFile> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: PlanFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if file.format_version != 1 {
            return Err(Error::UnsupportedVersion {
                found: file.format_version,
                expected: 1,
            });
        }
        Ok(file)
    }

    /// Loads manifolds and rebuilds the plan. Relative manifold directories
    /// resolve against `base`.
    pub fn load(&self, base: impl AsRef<Path>) -> Result<SteeringPlan> {
        let mut units = Vec::with_capacity(self.units.len());
        for u in &self.units {
            let dir = base.as_ref().join(&u.manifold_dir);
            let manifold = Arc::new(read_manifold(&dir, u.head)?);
            let threshold = Threshold {
                value: u.tau.unwrap_or(f64::INFINITY),
                percentile: u.q,
                n_calibration_steps: manifold.threshold().map_or(0, |t| t.n_calibration_steps),
            };
            units.push(PlanUnit {
                objective: u.objective,
                unit: SteeringUnit::new(manifold, threshold, u.alpha)?,
            });
        }
        units.sort_by_key(|u| (u.objective, u.unit.head()));
        for (i, u) in units.iter().enumerate() {
            if units[..i].iter().any(|p| p.objective == u.objective && p.unit.head() == u.unit.head()) {
                return Err(Error::InvalidArgument(format!(
                    "head {} appears twice in objective {}",
                    u.unit.head(),
                    u.objective
                )));
            }
        }
        Ok(SteeringPlan {
            objectives: self.objectives.clone(),
            units,
        })
    }
}
