use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mags::decoder::{generate_synthetic_dataset, DecoderConfig, DriftSchedule, DriftSpec, SynthConfig, ToyDecoder};
use mags::detector::{read_scorecard_csv, Aggregation};
use mags::harness::{
    bench_overhead, bootstrap_ci, cmd_pipeline, export_auroc_heatmap, export_trajectory_projection, load_dataset,
    stage_calibrate, stage_detect, stage_eval, stage_fit, stage_select, stage_steer, write_trajectory_csv, BenchConfig,
    RunConfig, Stage, StageError, DEFAULT_RESAMPLES, DEFAULT_SEED,
};
use mags::manifold::read_manifold;
use mags::trace::{read_dataset, write_dataset};
use mags::HeadId;

/// Contrastive error manifolds for attention heads.
#[derive(Parser)]
#[command(name = "mags", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Trace-store dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory (or file, for exports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Error subspace rank.
    #[arg(long, global = true, default_value_t = 4)]
    k: usize,
    /// Calibration percentile of correct-trace scores.
    #[arg(long, global = true, default_value_t = 99.0)]
    q: f64,
    /// Steering strength.
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, global = true, default_value_t = 3)]
    top_k_heads: usize,
    /// Trajectory aggregation for detection.
    #[arg(long, global = true, value_enum, default_value_t = Agg::Max)]
    aggregate: Agg,
    /// Trajectory aggregation for head selection.
    #[arg(long, global = true, value_enum, default_value_t = Agg::Mean)]
    select_aggregate: Agg,
    /// Only consider heads on these layers.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true, default_value_t = 0.7)]
    train_fraction: f64,
    /// Worker threads for per-head stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "default")]
    objective: String,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Max,
    Mean,
}

impl From<Agg> for Aggregation {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Max => Aggregation::Max,
            Agg::Mean => Aggregation::Mean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Constant,
    Compounding,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-drift dataset from the toy decoder.
    Synth(SynthArgs),
    /// Split by problem and fit one manifold per head.
    Fit,
    /// Store percentile thresholds with the fitted manifolds.
    Calibrate,
    /// Score held-out traces per head and pick the top-K heads.
    Select,
    /// Write per-trace scores for the selected heads.
    Detect,
    /// Build the steering plan from the selected heads.
    Steer,
    /// Replay held-out traces through the plan.
    Eval,
    /// Run fit through eval and write a run summary.
    Pipeline,
    /// Percentile bootstrap CI of a success rate.
    Bootstrap(BootstrapArgs),
    /// Project traces onto a manifold's leading coordinates.
    ExportTraj(ExportTrajArgs),
    /// Layer-by-head AUROC grid from a scorecard.
    ExportHeatmap(ExportHeatmapArgs),
    /// Time the monitoring path against the number of heads.
    BenchOverhead(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    problems: usize,
    #[arg(long, default_value_t = 4)]
    traces: usize,
    #[arg(long, default_value_t = 6)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Per-component noise standard deviation.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    /// Drift magnitude at onset, in units of the noise level.
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
    /// Planted heads as layer:head (repeatable).
    #[arg(long, num_args = 1.., default_values = ["3:1", "3:2"])]
    planted: Vec<HeadId>,
    #[arg(long, default_value_t = 4)]
    onset: usize,
    #[arg(long, value_enum, default_value_t = Schedule::Compounding)]
    schedule: Schedule,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 4)]
    model_layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    context: usize,
}

#[derive(Args)]
struct BootstrapArgs {
    /// File of 0/1 outcomes separated by whitespace or commas.
    #[arg(long, conflicts_with = "outcomes")]
    input: Option<PathBuf>,
    /// Inline outcomes, e.g. 1,0,1.
    #[arg(long, value_delimiter = ',')]
    outcomes: Option<Vec<u8>>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
}

#[derive(Args)]
struct ExportTrajArgs {
    /// Directory holding the manifold files.
    #[arg(long)]
    manifolds: PathBuf,
    #[arg(long)]
    head: HeadId,
    #[arg(long, default_value_t = 4)]
    dims: usize,
}

#[derive(Args)]
struct ExportHeatmapArgs {
    /// Scorecard CSV written by `select`.
    #[arg(long)]
    scorecard: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 16])]
    head_counts: Vec<usize>,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }

    fn stage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Self {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| Failure::invalid(anyhow!("--{flag} is required")))
}

fn run_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::new(required(&c.dataset, "dataset")?, required(&c.out, "out")?);
    cfg.seed = c.seed.unwrap_or(0);
    cfg.k = c.k;
    cfg.q = c.q;
    cfg.alpha = c.alpha;
    cfg.top_k_heads = c.top_k_heads;
    cfg.detect_aggregation = c.aggregate.into();
    cfg.select_aggregation = c.select_aggregate.into();
    cfg.layers = c.layers.clone();
    cfg.train_fraction = c.train_fraction;
    cfg.workers = c.workers;
    cfg.objective = c.objective.clone();
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(Failure::stage)?;
    writeln!(out).map_err(Failure::stage)
}

fn create(path: &Path) -> CliResult<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(Failure::invalid)?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::invalid)
}

fn synth(c: &Common, a: &SynthArgs) -> CliResult {
    let out = required(&c.out, "out")?;
    let seed = c.seed.unwrap_or(0);
    let model_cfg = DecoderConfig {
        layers: a.model_layers,
        heads: a.heads,
        head_dim: a.head_dim,
        vocab: a.vocab,
        context: a.context,
        seed,
    };
    let model = ToyDecoder::new(model_cfg).map_err(Failure::invalid)?;
    let schedule = match a.schedule {
        Schedule::Constant => DriftSchedule::Constant,
        Schedule::Compounding => DriftSchedule::Compounding { gamma: a.gamma },
    };
    let drift = DriftSpec::random(&a.planted, a.head_dim, a.onset, a.snr * a.noise, schedule, seed.wrapping_add(1))
        .map_err(Failure::invalid)?;
    let synth_cfg = SynthConfig {
        problems: a.problems,
        traces_per_problem: a.traces,
        prompt_len: a.prompt_len,
        steps: a.steps,
        noise_std: a.noise,
        seed,
    };
    let ds = generate_synthetic_dataset(&model, &synth_cfg, &drift).map_err(Failure::invalid)?;
    write_dataset(&ds, out).map_err(Failure::stage)?;

    #[derive(Serialize)]
    struct SynthRecord<'a> {
        decoder: &'a DecoderConfig,
        synth: &'a SynthConfig,
        drift: &'a DriftSpec,
    }
    let record = SynthRecord {
        decoder: &model_cfg,
        synth: &synth_cfg,
        drift: &drift,
    };
    let mut json = serde_json::to_vec_pretty(&record).map_err(Failure::stage)?;
    json.push(b'\n');
    fs::write(out.join("synth.json"), json).map_err(Failure::stage)?;
    log::info!("wrote {} traces to {}", ds.len(), out.display());
    Ok(())
}

fn stage_verb(c: &Common, stage: Stage) -> CliResult {
    let cfg = run_config(c)?;
    let ds = load_dataset(&cfg)?;
    let wrap = |e| StageError::new(stage, e);
    match stage {
        Stage::Fit => print_json(&stage_fit(&cfg, &ds).map_err(wrap)?),
        Stage::Calibrate => {
            let ms = stage_calibrate(&cfg, &ds).map_err(wrap)?;
            let taus: Vec<_> = ms.iter().map(|m| (m.head(), m.threshold().map(|t| t.value))).collect();
            print_json(&taus)
        }
        Stage::Select => print_json(&stage_select(&cfg, &ds).map_err(wrap)?.2),
        Stage::Detect => {
            for p in stage_detect(&cfg, &ds).map_err(wrap)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Stage::Steer => print_json(&stage_steer(&cfg).map_err(wrap)?.heads()),
        Stage::Eval => print_json(&stage_eval(&cfg, &ds).map_err(wrap)?),
        Stage::Validate => Ok(()),
    }
}

fn parse_outcomes(text: &str) -> anyhow::Result<Vec<bool>> {
    text.split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(anyhow!("outcome {other:?} is not 0 or 1")),
        })
        .collect()
}

fn bootstrap(c: &Common, a: &BootstrapArgs) -> CliResult {
    let outcomes = match (&a.input, &a.outcomes) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()));
            parse_outcomes(&text.map_err(Failure::invalid)?).map_err(Failure::invalid)?
        }
        (None, Some(v)) => parse_outcomes(&v.iter().map(u8::to_string).collect::<Vec<_>>().join(",")).map_err(Failure::invalid)?,
        (None, None) => return Err(Failure::invalid(anyhow!("pass --input or --outcomes"))),
    };
    let r = bootstrap_ci(&outcomes, a.resamples, c.seed.unwrap_or(DEFAULT_SEED)).map_err(Failure::invalid)?;
    match &c.out {
        Some(path) => {
            serde_json::to_writer_pretty(create(path)?, &r).map_err(Failure::stage)?;
            Ok(())
        }
        None => print_json(&r),
    }
}

fn export_traj(c: &Common, a: &ExportTrajArgs) -> CliResult {
    let ds = read_dataset(required(&c.dataset, "dataset")?).map_err(Failure::invalid)?;
    let m = read_manifold(&a.manifolds, a.head).map_err(Failure::invalid)?;
    let rows = export_trajectory_projection(&m, &ds, a.dims).map_err(Failure::invalid)?;
    let out = create(required(&c.out, "out")?)?;
    write_trajectory_csv(out, &rows).map_err(Failure::stage)
}

fn export_heatmap(c: &Common, a: &ExportHeatmapArgs) -> CliResult {
    let file = fs::File::open(&a.scorecard).with_context(|| format!("opening {}", a.scorecard.display()));
    let cards = read_scorecard_csv(file.map_err(Failure::invalid)?).map_err(Failure::invalid)?;
    let out = create(required(&c.out, "out")?)?;
    export_auroc_heatmap(out, &cards).map_err(Failure::invalid)?;
    Ok(())
}

fn bench(c: &Common, a: &BenchArgs) -> CliResult {
    let cfg = BenchConfig {
        head_counts: a.head_counts.clone(),
        k: c.k,
        head_dim: a.head_dim,
        steps: a.steps,
        repeats: a.repeats,
        seed: c.seed.unwrap_or(0),
    };
    let report = bench_overhead(&cfg).map_err(Failure::invalid)?;
    match &c.out {
        Some(path) => serde_json::to_writer_pretty(create(path)?, &report).map_err(Failure::stage),
        None => print_json(&report),
    }
}

fn run(cli: &Cli) -> CliResult {
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => synth(c, a),
        Command::Fit => stage_verb(c, Stage::Fit),
        Command::Calibrate => stage_verb(c, Stage::Calibrate),
        Command::Select => stage_verb(c, Stage::Select),
        Command::Detect => stage_verb(c, Stage::Detect),
        Command::Steer => stage_verb(c, Stage::Steer),
        Command::Eval => stage_verb(c, Stage::Eval),
        Command::Pipeline => {
            let summary = cmd_pipeline(&run_config(c)?)?;
            let heads: Vec<String> = summary.selected_heads.iter().map(HeadId::to_string).collect();
            println!("selected heads: {}", heads.join(" "));
            Ok(())
        }
        Command::Bootstrap(a) => bootstrap(c, a),
        Command::ExportTraj(a) => export_traj(c, a),
        Command::ExportHeatmap(a) => export_heatmap(c, a),
        Command::BenchOverhead(a) => bench(c, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
