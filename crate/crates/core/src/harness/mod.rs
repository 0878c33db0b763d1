//! Pipeline orchestration, bootstrap intervals and figure-data exports.

mod bench;
mod bootstrap;
mod export;
mod pipeline;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detector::{Aggregation, DEFAULT_PERCENTILE};
use crate::error::Error;
use crate::manifold::DEFAULT_RANK;
use crate::steering::DEFAULT_ALPHA;

pub use bench::{bench_overhead, linear_fit, BenchConfig, BenchPoint, BenchReport, LinearFit};
pub use bootstrap::{bootstrap_ci, BootstrapResult, DEFAULT_RESAMPLES, DEFAULT_SEED};
pub use export::{
    export_auroc_heatmap, export_trajectory_projection, mean_distance_after, project_decode, project_trace,
    read_trajectory_csv, write_trajectory_csv, HeatmapRow, TrajectoryRow,
};
pub use pipeline::{
    cmd_pipeline, load_dataset, stage_calibrate, stage_detect, stage_eval, stage_fit, stage_select, stage_steer,
    EvalRow, EvalSummary, FitOutcome, RunSummary, SkippedHead, ARTIFACT_FILES,
};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_TOP_K_HEADS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub train_fraction: f64,
    pub seed: u64,
    /// Subspace rank.
    pub k: usize,
    /// Calibration percentile.
    pub q: f64,
    pub alpha: f64,
    /// Number of heads to steer.
    pub top_k_heads: usize,
    /// Aggregation for detection scorecards.
    pub detect_aggregation: Aggregation,
    /// Aggregation used to rank heads for selection.
    pub select_aggregation: Aggregation,
    /// Restrict to heads on these layers; all monitored heads when `None`.
    pub layers: Option<Vec<usize>>,
    pub objective: String,
    /// Worker threads for per-head work; rayon's default when `None`.
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            out: out.into(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
            k: DEFAULT_RANK,
            q: DEFAULT_PERCENTILE,
            alpha: DEFAULT_ALPHA,
            top_k_heads: DEFAULT_TOP_K_HEADS,
            detect_aggregation: Aggregation::Max,
            select_aggregation: Aggregation::Mean,
            layers: None,
            objective: "default".into(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.dataset.is_dir() {
            return bad(format!("dataset directory {} does not exist", self.dataset.display()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.q > 0.0 && self.q < 100.0) {
            return bad(format!("q = {} outside (0, 100)", self.q));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha = {} outside (0, 1]", self.alpha));
        }
        if self.top_k_heads == 0 {
            return bad("top-k-heads must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.layers.as_ref().is_some_and(Vec::is_empty) {
            return bad("layer list is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Fit,
    Calibrate,
    Select,
    Detect,
    Steer,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Fit => "fit",
            Stage::Calibrate => "calibrate",
            Stage::Select => "select",
            Stage::Detect => "detect",
            Stage::Steer => "steer",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }

    /// 2 for invalid configuration or unreadable input, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.stage == Stage::Validate {
            2
        } else {
            3
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T, Error> {
    fn stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError::new(stage, e))
    }
}
