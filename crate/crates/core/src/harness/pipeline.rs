use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunConfig, Stage, StageContext, StageError};
use crate::detector::{
    calibrate_threshold, evaluate_head, score_rows, select_heads, write_score_csv, write_scorecard_csv, HeadScorecard,
    ScorecardRow,
};
use crate::error::{Error, Result};
use crate::manifold::{fit_manifold, list_manifolds, manifold_stem, read_manifold, write_manifold, ErrorManifold};
use crate::steering::{step_steer, HeadActivations, PlanFile, SteeringPlan, SteeringUnit};
use crate::trace::{
    read_dataset, split_by_problem, store, validate_dataset, HeadId, ProblemSplit, TraceDataset,
};

const SPLIT_FILE: &str = "split.json";
const MANIFOLD_DIR: &str = "manifolds";
const FIT_FILE: &str = "fit.json";
const SCORECARD_FILE: &str = "scorecard.csv";
const SELECTION_FILE: &str = "selection.csv";
const SELECTED_FILE: &str = "selected_heads.json";
const SCORES_DIR: &str = "scores";
const PLAN_FILE: &str = "plan.json";
const EVAL_CSV: &str = "eval.csv";
const EVAL_FILE: &str = "eval.json";
const SUMMARY_FILE: &str = "summary.json";
const TIMINGS_FILE: &str = "timings.json";

/// Top-level files a full pipeline run writes besides the manifold and
/// score directories.
pub const ARTIFACT_FILES: [&str; 10] = [
    SPLIT_FILE,
    FIT_FILE,
    SCORECARD_FILE,
    SELECTION_FILE,
    SELECTED_FILE,
    PLAN_FILE,
    EVAL_CSV,
    EVAL_FILE,
    SUMMARY_FILE,
    TIMINGS_FILE,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedHead {
    pub head: HeadId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub fitted: Vec<HeadId>,
    pub skipped: Vec<SkippedHead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub trace_id: String,
    pub problem_id: String,
    pub label: u8,
    pub steps: usize,
    pub fired_steps: usize,
    pub first_fire: Option<usize>,
    pub mean_score_pre: f64,
    pub mean_score_post: f64,
}

/// Offline replay of the steering plan over held-out recorded traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub traces: usize,
    /// Fraction of steps on which any unit fired, per class.
    pub correct_step_fire_rate: f64,
    pub incorrect_step_fire_rate: f64,
    /// Fraction of traces with at least one firing, per class.
    pub correct_trace_fire_rate: f64,
    pub incorrect_trace_fire_rate: f64,
    pub mean_score_pre: f64,
    pub mean_score_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub traces: usize,
    pub problems: usize,
    pub contrastive_problems: usize,
    pub monitored_heads: usize,
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub train_problems: usize,
    pub test_problems: usize,
    pub fit: FitOutcome,
    pub detection: Vec<ScorecardRow>,
    pub selection: Vec<ScorecardRow>,
    pub selected_heads: Vec<HeadId>,
    pub eval: EvalSummary,
    /// SHA-256 of every artifact except this summary and the timings.
    pub artifacts: BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

fn candidate_heads(cfg: &RunConfig, ds: &TraceDataset) -> Result<Vec<HeadId>> {
    let heads: Vec<HeadId> = ds
        .monitored_heads()
        .iter()
        .copied()
        .filter(|h| cfg.layers.as_ref().is_none_or(|ls| ls.contains(&h.layer)))
        .collect();
    if heads.is_empty() {
        return Err(Error::InvalidArgument("no monitored head on the requested layers".into()));
    }
    Ok(heads)
}

fn read_split(cfg: &RunConfig, ds: &TraceDataset) -> Result<(TraceDataset, TraceDataset)> {
    let split: ProblemSplit = read_json(&cfg.out.join(SPLIT_FILE))?;
    Ok((ds.restrict(&split.train), ds.restrict(&split.test)))
}

fn load_manifolds(dir: &Path, heads: Option<&[HeadId]>) -> Result<Vec<ErrorManifold>> {
    let heads = match heads {
        Some(h) => h.to_vec(),
        None => list_manifolds(dir)?,
    };
    if heads.is_empty() {
        return Err(Error::Empty("manifold directory"));
    }
    heads.into_iter().map(|h| read_manifold(dir, h)).collect()
}

/// Reads and validates the dataset; failures here are validation failures.
pub fn load_dataset(cfg: &RunConfig) -> Result<TraceDataset, StageError> {
    cfg.validate().stage(Stage::Validate)?;
    let ds = read_dataset(&cfg.dataset).stage(Stage::Validate)?;
    let report = validate_dataset(&ds);
    for p in report.flagged() {
        log::warn!("problem {} is not contrastive: {:?}", p.problem_id, p.flags);
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e)).stage(Stage::Validate)?;
    Ok(ds)
}

/// Splits by problem and fits one manifold per candidate head on the
/// training side. Heads that cannot be fitted are skipped and logged.
pub fn stage_fit(cfg: &RunConfig, ds: &TraceDataset) -> Result<FitOutcome> {
    let heads = candidate_heads(cfg, ds)?;
    let split = split_by_problem(ds, cfg.train_fraction, cfg.seed)?;
    write_json(&cfg.out.join(SPLIT_FILE), &split)?;
    let train = ds.restrict(&split.train);

    let results: Vec<(HeadId, Result<ErrorManifold>)> =
        pool(cfg)?.install(|| heads.par_iter().map(|&h| (h, fit_manifold(&train, h, cfg.k))).collect());

    let dir = cfg.out.join(MANIFOLD_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut outcome = FitOutcome {
        fitted: Vec::new(),
        skipped: Vec::new(),
    };
    let mut first_error = None;
    for (head, result) in results {
        match result {
            Ok(m) => {
                write_manifold(&dir, &m)?;
                outcome.fitted.push(head);
            }
            Err(e) => {
                log::warn!("skipping head {head}: {e}");
                outcome.skipped.push(SkippedHead {
                    head,
                    reason: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if outcome.fitted.is_empty() {
        return Err(first_error.unwrap_or(Error::Empty("candidate heads")));
    }
    write_json(&cfg.out.join(FIT_FILE), &outcome)?;
    log::info!("fitted {} heads, skipped {}", outcome.fitted.len(), outcome.skipped.len());
    Ok(outcome)
}

/// Calibrates `tau` at percentile `q` of training correct-trace scores and
/// stores it with each manifold.
pub fn stage_calibrate(cfg: &RunConfig, ds: &TraceDataset) -> Result<Vec<ErrorManifold>> {
    let (train, _) = read_split(cfg, ds)?;
    let dir = cfg.out.join(MANIFOLD_DIR);
    let manifolds = load_manifolds(&dir, None)?;
    let calibrated: Vec<ErrorManifold> = pool(cfg)?.install(|| {
        manifolds
            .into_par_iter()
            .map(|m| {
                let t = calibrate_threshold(&m, train.traces(), cfg.q)?;
                Ok(m.with_threshold(t))
            })
            .collect::<Result<_>>()
    })?;
    for m in &calibrated {
        write_manifold(&dir, m)?;
    }
    Ok(calibrated)
}

/// Held-out scorecards for every fitted head, then the top-K heads by
/// selection-aggregation AUROC.
pub fn stage_select(cfg: &RunConfig, ds: &TraceDataset) -> Result<(Vec<HeadScorecard>, Vec<HeadScorecard>, Vec<HeadId>)> {
    let (train, test) = read_split(cfg, ds)?;
    let manifolds = load_manifolds(&cfg.out.join(MANIFOLD_DIR), None)?;
    let cards: Vec<(HeadScorecard, HeadScorecard)> = pool(cfg)?.install(|| {
        manifolds
            .par_iter()
            .map(|m| {
                Ok((
                    evaluate_head(m, &train, &test, cfg.detect_aggregation, cfg.q)?,
                    evaluate_head(m, &train, &test, cfg.select_aggregation, cfg.q)?,
                ))
            })
            .collect::<Result<_>>()
    })?;
    let (detection, selection): (Vec<_>, Vec<_>) = cards.into_iter().unzip();
    write_scorecard_csv(create_file(&cfg.out.join(SCORECARD_FILE))?, &detection)?;
    write_scorecard_csv(create_file(&cfg.out.join(SELECTION_FILE))?, &selection)?;
    let selected = select_heads(&selection, cfg.top_k_heads.min(selection.len()))?;
    write_json(&cfg.out.join(SELECTED_FILE), &selected)?;
    log::info!("selected heads: {selected:?}");
    Ok((detection, selection, selected))
}

/// Per-trace held-out scores for each selected head.
pub fn stage_detect(cfg: &RunConfig, ds: &TraceDataset) -> Result<Vec<PathBuf>> {
    let (_, test) = read_split(cfg, ds)?;
    let selected: Vec<HeadId> = read_json(&cfg.out.join(SELECTED_FILE))?;
    let manifolds = load_manifolds(&cfg.out.join(MANIFOLD_DIR), Some(&selected))?;
    let dir = cfg.out.join(SCORES_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for m in &manifolds {
        let threshold = m.threshold().ok_or_else(|| {
            Error::InvalidArgument(format!("manifold for head {} is not calibrated", m.head()))
        })?;
        let rows = score_rows(m, test.traces(), cfg.detect_aggregation, threshold)?;
        let path = dir.join(format!("{}.csv", manifold_stem(m.head()).replace("manifold", "scores")));
        write_score_csv(create_file(&path)?, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Builds the steering plan from the selected, calibrated manifolds.
pub fn stage_steer(cfg: &RunConfig) -> Result<SteeringPlan> {
    let selected: Vec<HeadId> = read_json(&cfg.out.join(SELECTED_FILE))?;
    let units = load_manifolds(&cfg.out.join(MANIFOLD_DIR), Some(&selected))?
        .into_iter()
        .map(|m| SteeringUnit::from_calibrated(Arc::new(m), cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    let plan = SteeringPlan::new(cfg.objective.clone(), units)?;
    PlanFile::describe(&plan, &[PathBuf::from(MANIFOLD_DIR)])?.write(cfg.out.join(PLAN_FILE))?;
    Ok(plan)
}

/// Replays held-out traces through the plan offline: each recorded step is
/// steered independently, without propagation to later steps.
pub fn stage_eval(cfg: &RunConfig, ds: &TraceDataset) -> Result<EvalSummary> {
    let (_, test) = read_split(cfg, ds)?;
    let plan = PlanFile::read(cfg.out.join(PLAN_FILE))?.load(&cfg.out)?;
    let heads = plan.heads();
    let mut rows = Vec::with_capacity(test.len());
    for trace in test.traces() {
        let slots = heads
            .iter()
            .map(|&h| trace.head_index(h).ok_or(Error::UnknownHead(h)))
            .collect::<Result<Vec<_>>>()?;
        let (mut fired_steps, mut first_fire, mut pre, mut post) = (0, None, 0.0, 0.0);
        for step in 0..trace.len() {
            let mut acts: HeadActivations = heads
                .iter()
                .zip(&slots)
                .map(|(&h, &s)| (h, trace.activation(step, s).iter().map(|&v| f64::from(v)).collect()))
                .collect();
            let records = step_steer(&plan, step, &mut acts)?;
            if records.iter().any(|r| r.fired) {
                fired_steps += 1;
                first_fire.get_or_insert(step);
            }
            pre += records.iter().map(|r| r.score_pre).sum::<f64>();
            post += records.iter().map(|r| r.score_post).sum::<f64>();
        }
        let n = (trace.len() * heads.len()).max(1) as f64;
        rows.push(EvalRow {
            trace_id: trace.meta.trace_id.clone(),
            problem_id: trace.meta.problem_id.clone(),
            label: trace.label().into(),
            steps: trace.len(),
            fired_steps,
            first_fire,
            mean_score_pre: pre / n,
            mean_score_post: post / n,
        });
    }

    let mut w = csv::Writer::from_writer(create_file(&cfg.out.join(EVAL_CSV))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(cfg.out.join(EVAL_CSV), e))?;

    let rate = |correct: u8, f: &dyn Fn(&EvalRow) -> (usize, usize)| {
        let (num, den) = rows
            .iter()
            .filter(|r| r.label == correct)
            .map(f)
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let steps = |r: &EvalRow| (r.fired_steps, r.steps);
    let traces = |r: &EvalRow| (usize::from(r.fired_steps > 0), 1);
    let total_steps: usize = rows.iter().map(|r| r.steps).sum::<usize>().max(1);
    let summary = EvalSummary {
        traces: rows.len(),
        correct_step_fire_rate: rate(1, &steps),
        incorrect_step_fire_rate: rate(0, &steps),
        correct_trace_fire_rate: rate(1, &traces),
        incorrect_trace_fire_rate: rate(0, &traces),
        mean_score_pre: rows.iter().map(|r| r.mean_score_pre * r.steps as f64).sum::<f64>() / total_steps as f64,
        mean_score_post: rows.iter().map(|r| r.mean_score_post * r.steps as f64).sum::<f64>() / total_steps as f64,
    };
    write_json(&cfg.out.join(EVAL_FILE), &summary)?;
    Ok(summary)
}

fn collect_digests(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_digests(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("inside root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if key != SUMMARY_FILE && key != TIMINGS_FILE {
            out.insert(key, sha256_file(&path)?);
        }
    }
    Ok(())
}

fn timed<T>(timings: &mut BTreeMap<&'static str, f64>, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T, StageError> {
    let start = Instant::now();
    let out = f().stage(stage)?;
    timings.insert(stage.name(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs every stage in order and writes `summary.json` (deterministic for a
/// fixed configuration) and `timings.json` (wall-clock seconds per stage).
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<RunSummary, StageError> {
    let mut timings = BTreeMap::new();
    let clock = Instant::now();
    let ds = load_dataset(cfg)?;
    timings.insert(Stage::Validate.name(), clock.elapsed().as_secs_f64());
    let report = validate_dataset(&ds);

    let fit = timed(&mut timings, Stage::Fit, || stage_fit(cfg, &ds))?;
    timed(&mut timings, Stage::Calibrate, || stage_calibrate(cfg, &ds))?;
    let (detection, selection, selected) = timed(&mut timings, Stage::Select, || stage_select(cfg, &ds))?;
    timed(&mut timings, Stage::Detect, || stage_detect(cfg, &ds))?;
    timed(&mut timings, Stage::Steer, || stage_steer(cfg))?;
    let eval = timed(&mut timings, Stage::Eval, || stage_eval(cfg, &ds))?;

    let finish = || -> Result<RunSummary> {
        let split: ProblemSplit = read_json(&cfg.out.join(SPLIT_FILE))?;
        let mut dataset_digests = BTreeMap::new();
        for name in [store::MANIFEST_FILE, store::BLOB_FILE] {
            dataset_digests.insert(name.to_owned(), sha256_file(&cfg.dataset.join(name))?);
        }
        let mut artifacts = BTreeMap::new();
        collect_digests(&cfg.out, &cfg.out, &mut artifacts)?;
        let summary = RunSummary {
            config: cfg.clone(),
            dataset: DatasetSummary {
                traces: ds.len(),
                problems: report.problems.len(),
                contrastive_problems: report.contrastive_problems(),
                monitored_heads: ds.monitored_heads().len(),
                sha256: dataset_digests,
            },
            train_problems: split.train.len(),
            test_problems: split.test.len(),
            fit,
            detection: detection.iter().map(ScorecardRow::from).collect(),
            selection: selection.iter().map(ScorecardRow::from).collect(),
            selected_heads: selected,
            eval,
            artifacts,
        };
        write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
        timings.insert("total", clock.elapsed().as_secs_f64());
        write_json(&cfg.out.join(TIMINGS_FILE), &timings)?;
        Ok(summary)
    };
    finish().stage(Stage::Eval)
}
