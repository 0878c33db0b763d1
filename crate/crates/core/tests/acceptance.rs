//! Acceptance criteria P1 to P9. Each test prints one `P<n> ... PASS|FAIL` line;
//! run with `--nocapture --test-threads=1` to see them in order.

mod common;

use std::fmt::Write as _;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use common::*;
use mags::decoder::{
    attention_shift, decode_forced, decode_greedy, synthetic_label, synthetic_prompts, trace_noise_seed, DecodeOptions,
    DecoderConfig, DriftSchedule, DriftSpec, Perturbation, PlantedDirection, SynthConfig, ToyDecoder,
    DEFAULT_GAMMA, DEFAULT_SHIFT_EPS,
};
use mags::detector::{
    auroc_counts, balanced_accuracy_at, balanced_accuracy_threshold, calibrate_threshold, evaluate_head, is_triggered,
    percentile, proximity_score, select_heads, Aggregation, HeadScorecard, Threshold, NOTABLE_AUROC,
};
use mags::harness::{bench_overhead, bootstrap_ci, mean_distance_after, project_decode, BenchConfig};
use mags::manifold::{
    build_difference_matrix, fit_error_subspace, fit_manifold, principal_angles, projector, DifferenceMatrix,
    ErrorManifold,
};
use mags::steering::{
    correct_activation, correct_activation_projector_form, verify_information_preservation, SteeringPlan,
    SteeringUnit, ALPHA_SWEEP,
};
use mags::trace::{read_dataset, split_by_problem, write_dataset, TraceDataset};
use mags::HeadId;
use rand::Rng;

/// Tests run one at a time so the overhead timings see an idle machine.
static SERIAL: Mutex<()> = Mutex::new(());

/// Collects failed checks and prints the verdict line.
struct Criterion {
    id: &'static str,
    name: &'static str,
    started: Instant,
    failures: Vec<String>,
    notes: String,
}

impl Criterion {
    fn new(id: &'static str, name: &'static str) -> Self {
        Self {
            id,
            name,
            started: Instant::now(),
            failures: Vec::new(),
            notes: String::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, s: impl AsRef<str>) {
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        self.notes.push_str(s.as_ref());
    }

    fn finish(self) {
        let secs = self.started.elapsed().as_secs_f64();
        let verdict = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        println!("{} {:<34} {verdict} ({secs:.2}s) {}", self.id, self.name, self.notes);
        for f in &self.failures {
            println!("    {f}");
        }
        assert!(self.failures.is_empty(), "{} failed: {:?}", self.id, self.failures);
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn random_orthonormal_manifold(seed: u64, k: usize, d: usize) -> ErrorManifold {
    let mut r = rng(seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &rows {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&v);
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    let basis = rows.concat().iter().map(|&x| x as f32).collect();
    let centroid = (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    ErrorManifold::new(HeadId::new(0, 0), basis, centroid, vec![1.0; k]).unwrap()
}

// ---------------------------------------------------------------- P1

#[test]
fn p1_manifold_algebra() {
    let _g = serial();
    let mut c = Criterion::new("P1", "manifold algebra");
    let h = HeadId::new(0, 0);

    let mut worst_orth = 0.0f64;
    let mut worst_proj = 0.0f64;
    for (case, &(n, d, k)) in [(8, 4, 2), (16, 16, 4), (40, 32, 4), (64, 64, 4), (64, 64, 8), (30, 64, 6)]
        .iter()
        .enumerate()
    {
        let mut r = rng(100 + case as u64);
        let dirs: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let mut rows = vec![0.0; n * d];
        for i in 0..n {
            for (j, dir) in dirs.iter().enumerate() {
                let w = r.random_range(0.5..1.5) * 20.0 / (j + 1) as f64;
                rows[i * d..(i + 1) * d].iter_mut().zip(dir).for_each(|(x, y)| *x += w * y);
            }
            rows[i * d..(i + 1) * d].iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
        }
        let diff = DifferenceMatrix {
            head: h,
            head_dim: d,
            rows: rows.clone(),
            retained_problem_ids: (0..n).map(|i| format!("p{i}")).collect(),
            skipped_problem_ids: vec![],
        };
        let sub = fit_error_subspace(&diff, k).unwrap();
        let m = ErrorManifold::new(h, sub.basis.clone(), vec![0.0; d], sub.singular_values.clone()).unwrap();
        worst_orth = worst_orth.max(m.orthonormality_error());
        worst_proj = worst_proj.max(max_abs_diff(&projector(&sub.basis, k, d), &oracle_projector(&rows, n, d, k)));
    }
    c.check(worst_orth <= 1e-6, || format!("orthonormality error {worst_orth:e} > 1e-6"));
    c.check(worst_proj <= 1e-6, || format!("projector vs eigen oracle {worst_proj:e} > 1e-6"));
    c.note(format!("|BB^T-I| {worst_orth:.1e}, |P-P_oracle| {worst_proj:.1e}"));

    // Per-problem offsets added to every trace of a problem leave D unchanged.
    // Dyadic values and power-of-two class sizes make every mean exact.
    let (problems, steps, d) = (12, 4, 8);
    let mut r = rng(7);
    let base: Vec<f32> = (0..problems * 4 * steps * d).map(|_| r.random_range(-64i32..64) as f32 / 16.0).collect();
    let offsets: Vec<Vec<f32>> =
        (0..problems).map(|_| (0..d).map(|_| r.random_range(-256i32..256) as f32 / 8.0).collect()).collect();
    let at = |p: usize, j: usize, t: usize, i: usize| base[((p * 4 + j) * steps + t) * d + i];
    let plain = dataset_from_fn(problems, 4, steps, 1, d, |p, j, t, _, i| at(p, j, t, i));
    let shifted = dataset_from_fn(problems, 4, steps, 1, d, |p, j, t, _, i| at(p, j, t, i) + offsets[p][i]);
    let (da, db) = (build_difference_matrix(&plain, h).unwrap(), build_difference_matrix(&shifted, h).unwrap());
    let d_delta = max_abs_diff(&da.rows, &db.rows);
    let (pa, pb) = (
        projector(&fit_error_subspace(&da, 3).unwrap().basis, 3, d),
        projector(&fit_error_subspace(&db, 3).unwrap().basis, 3, d),
    );
    let p_delta = max_abs_diff(&pa, &pb);
    c.check(d_delta <= 1e-8, || format!("offsets changed D by {d_delta:e}"));
    c.check(p_delta <= 1e-8, || format!("offsets changed B^T B by {p_delta:e}"));
    c.note(format!("offset cancellation D {d_delta:.0e}, P {p_delta:.0e}"));

    // Scaling all activations by s scales singular values by s, leaves the
    // basis alone and multiplies scores by s^2.
    let ds = random_dataset(11, 20, 5, 12);
    let m = fit_manifold(&ds, h, 4).unwrap();
    for s in [0.25f32, 3.0, 64.0] {
        let scaled = dataset_from_fn(20, 2, 5, 1, 12, |p, j, t, _, i| ds.traces()[p * 2 + j].activation(t, 0)[i] * s);
        let ms = fit_manifold(&scaled, h, 4).unwrap();
        let dp = max_abs_diff(&m.projector(), &ms.projector());
        c.check(dp <= 1e-5, || format!("scale {s}: projector moved by {dp:e}"));
        let sv_err = m
            .singular_values()
            .iter()
            .zip(ms.singular_values())
            .map(|(a, b)| (b / (a * s as f64) - 1.0).abs())
            .fold(0.0, f64::max);
        c.check(sv_err <= 1e-5, || format!("scale {s}: singular values off by {sv_err:e}"));
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let a_s: Vec<f64> = a.iter().map(|x| x * s as f64).collect();
        let (p0, p1) = (proximity_score(&m, &a).unwrap(), proximity_score(&ms, &a_s).unwrap());
        let rel = (p1 / (p0 * (s as f64).powi(2)) - 1.0).abs();
        c.check(rel <= 1e-4, || format!("scale {s}: score ratio off by {rel:e}"));
    }
    c.check(c.started.elapsed().as_secs_f64() < 10.0, || "runtime over 10 s".into());
    c.finish();
}

// ---------------------------------------------------------------- P2

#[test]
fn p2_correction() {
    let _g = serial();
    let mut c = Criterion::new("P2", "correction");
    let mut worst_forms = 0.0f64;
    let mut pairs = 0usize;
    let mut worst_contraction = 0.0f64;
    let mut worst_idem = 0.0f64;
    for (seed, (k, d)) in [(1, 16), (4, 16), (4, 64), (8, 64), (2, 5)].into_iter().enumerate() {
        let m = Arc::new(random_orthonormal_manifold(seed as u64, k, d));
        let full = SteeringUnit::new(m.clone(), Threshold::fixed(0.0), 1.0).unwrap();
        let mut r = rng(1000 + seed as u64);
        let p = m.projector();
        for _ in 0..120 {
            let a: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
            let x = correct_activation(&full, &a).unwrap();
            let y = correct_activation_projector_form(&full, &a).unwrap();
            worst_forms = worst_forms.max(max_abs_diff(&x, &y));

            // Two passes: the f32 basis is orthonormal only to about 1e-7.
            let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            for _ in 0..2 {
                let pv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| p[i * d + j] * v[j]).sum()).collect();
                v.iter_mut().zip(pv).for_each(|(x, y)| *x -= y);
            }
            match verify_information_preservation(&full, &a, &v) {
                Ok(true) => pairs += 1,
                other => c.failures.push(format!("preservation failed: {other:?}")),
            }

            let s0 = proximity_score(&m, &a).unwrap();
            for alpha in ALPHA_SWEEP {
                let unit = SteeringUnit::new(m.clone(), Threshold::fixed(0.0), alpha).unwrap();
                let s1 = proximity_score(&m, &correct_activation(&unit, &a).unwrap()).unwrap();
                let want = (1.0 - alpha).powi(2) * s0;
                worst_contraction = worst_contraction.max((s1 - want).abs() / s0);
            }
            let twice = correct_activation(&full, &x).unwrap();
            worst_idem = worst_idem.max(max_abs_diff(&twice, &x) / (1.0 + norm(&x)));
        }
    }
    c.check(worst_forms <= 1e-6, || format!("update vs projector form {worst_forms:e}"));
    c.check(pairs >= 100, || format!("only {pairs} preservation pairs"));
    c.check(worst_contraction <= 1e-5, || format!("contraction error {worst_contraction:e}"));
    c.check(worst_idem <= 1e-6, || format!("idempotence error {worst_idem:e}"));
    c.note(format!(
        "forms {worst_forms:.1e}, {pairs} null-space pairs, contraction {worst_contraction:.1e}, idempotence {worst_idem:.1e}"
    ));
    c.check(c.started.elapsed().as_secs_f64() < 10.0, || "runtime over 10 s".into());
    c.finish();
}

// ---------------------------------------------------------------- P3

#[test]
fn p3_detection_oracles() {
    let _g = serial();
    let mut c = Criterion::new("P3", "detection oracles");
    let mut r = rng(3);
    let mut cases = 0;
    for n in [2usize, 3, 10, 57, 200, 1000] {
        for levels in [3u32, 50, 100_000] {
            let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / 7.0).collect();
            let got = auroc_counts(&labels, &scores).unwrap();
            let want = auroc_pairs(&labels, &scores);
            c.check(got == want, || format!("n={n} levels={levels}: AUROC {got:?} vs enumeration {want:?}"));

            let best = balanced_accuracy_threshold(&labels, &scores).unwrap();
            let mut sweep = scores.clone();
            sweep.extend([f64::NEG_INFINITY, f64::INFINITY]);
            let top = sweep
                .iter()
                .map(|&t| balanced_accuracy_at(&labels, &scores, t).unwrap())
                .fold(0.0, f64::max);
            let at = balanced_accuracy_at(&labels, &scores, best.threshold).unwrap();
            c.check((best.balanced_accuracy - top).abs() < 1e-12 && (at - top).abs() < 1e-12, || {
                format!("n={n}: balanced accuracy {} / {at} vs sweep {top}", best.balanced_accuracy)
            });
            cases += 1;
        }
    }

    let values: Vec<f64> = (0..333).map(|_| r.random_range(-10.0..10.0)).collect();
    let mut prev = f64::NEG_INFINITY;
    let mut monotone = true;
    for i in 1..1000 {
        let p = percentile(&values, i as f64 * 0.1).unwrap();
        monotone &= p >= prev;
        prev = p;
    }
    c.check(monotone, || "percentile not monotone in q".into());

    let tau = 0.8125;
    c.check(!is_triggered(tau, &Threshold::fixed(tau)), || "score equal to tau fired".into());
    c.check(is_triggered(f64::from_bits(tau.to_bits() + 1), &Threshold::fixed(tau)), || {
        "score just above tau did not fire".into()
    });
    c.note(format!("{cases} AUROC/balanced-accuracy cases up to n=1000, percentile monotone, d=tau silent"));
    c.finish();
}

// ---------------------------------------------------------------- P4 fixture

const PLANTED: [HeadId; 2] = [HeadId::new(3, 1), HeadId::new(3, 2)];
const NOISE: f64 = 0.25;
const SNR: f64 = 5.0;
const ONSET: usize = 4;
const SEED: u64 = 0;

struct Planted {
    model: ToyDecoder,
    synth: SynthConfig,
    drift: DriftSpec,
    train: TraceDataset,
    test: TraceDataset,
    scorecards: Vec<HeadScorecard>,
    manifolds: Vec<Arc<ErrorManifold>>,
    build_secs: f64,
}

fn planted() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let model = ToyDecoder::new(DecoderConfig {
            layers: 4,
            heads: 4,
            head_dim: 16,
            vocab: 64,
            context: 128,
            seed: SEED,
        })
        .unwrap();
        let synth = SynthConfig {
            problems: 40,
            traces_per_problem: 4,
            seed: SEED,
            noise_std: NOISE,
            ..SynthConfig::default()
        };
        let drift = DriftSpec::random(
            &PLANTED,
            16,
            ONSET,
            SNR * NOISE,
            DriftSchedule::Compounding { gamma: DEFAULT_GAMMA },
            SEED + 1,
        )
        .unwrap();
        let ds = mags::decoder::generate_synthetic_dataset(&model, &synth, &drift).unwrap();
        let split = split_by_problem(&ds, 0.7, SEED).unwrap();
        let train = ds.restrict(&split.train);
        let test = ds.restrict(&split.test);
        let mut scorecards = Vec::new();
        let mut manifolds = Vec::new();
        for &h in ds.monitored_heads() {
            let mut m = fit_manifold(&train, h, 4).unwrap();
            let card = evaluate_head(&m, &train, &test, Aggregation::Max, 99.0).unwrap();
            m.set_threshold(Some(card.threshold));
            scorecards.push(card);
            manifolds.push(Arc::new(m));
        }
        Planted {
            model,
            synth,
            drift,
            train,
            test,
            scorecards,
            manifolds,
            build_secs: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn p4_planted_drift() {
    let _g = serial();
    let mut c = Criterion::new("P4", "planted-drift detection");
    let fx = planted();
    let mut worst_null = 0.0f64;
    let mut worst_planted = 1.0f64;
    for card in &fx.scorecards {
        if PLANTED.contains(&card.head) {
            worst_planted = worst_planted.min(card.auroc);
            c.check(card.auroc >= 0.95, || format!("planted head {} AUROC {:.3} < 0.95", card.head, card.auroc));
        } else {
            worst_null = worst_null.max(card.auroc);
            c.check(card.auroc <= NOTABLE_AUROC, || {
                format!("non-planted head {} AUROC {:.3} > {NOTABLE_AUROC}", card.head, card.auroc)
            });
        }
    }
    let mut worst_angle = 0.0f64;
    for h in PLANTED {
        let m1 = fit_manifold(&fx.train, h, 1).unwrap();
        let dir = fx.drift.direction(h).unwrap();
        let deg = principal_angles(m1.basis(), dir, 16)[0].to_degrees();
        worst_angle = worst_angle.max(deg);
        c.check(deg <= 5.0, || format!("head {h}: angle to planted direction {deg:.2} deg > 5"));
    }
    // Detection scorecards use max aggregation, selection ranks by mean.
    let by_mean: Vec<HeadScorecard> = fx
        .manifolds
        .iter()
        .map(|m| evaluate_head(m, &fx.train, &fx.test, Aggregation::Mean, 99.0).unwrap())
        .collect();
    let mut picked = Vec::new();
    for (name, cards) in [("max", &fx.scorecards), ("mean", &by_mean)] {
        picked = select_heads(cards, PLANTED.len()).unwrap();
        picked.sort();
        c.check(picked == PLANTED, || format!("select_heads ({name}) returned {picked:?}"));
    }
    let secs = fx.build_secs + c.started.elapsed().as_secs_f64();
    c.note(format!(
        "planted AUROC >= {worst_planted:.3}, non-planted <= {worst_null:.3}, angle {worst_angle:.2} deg, selected {:?}, {secs:.2}s with synthesis",
        picked.iter().map(ToString::to_string).collect::<Vec<_>>()
    ));
    c.check(secs < 60.0, || format!("runtime {secs:.1} s over 60 s"));
    c.finish();
}

// ---------------------------------------------------------------- P5

#[test]
fn p5_noop_and_propagation() {
    let _g = serial();
    let mut c = Criterion::new("P5", "no-op plan and propagation");
    let fx = planted();
    let prompts = synthetic_prompts(&fx.synth, 64);

    // tau = +inf on every head: decodes must match bit for bit.
    let disabled: Vec<SteeringUnit> = fx
        .manifolds
        .iter()
        .map(|m| SteeringUnit::new(m.clone(), Threshold::disabled(), 1.0).unwrap())
        .collect();
    let noop = SteeringPlan::new("default", disabled).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut identical = 0;
    for p in &prompts[..8] {
        let a = decode_greedy(&fx.model, &p.prompt, 24, DecodeOptions::default()).unwrap();
        let b = decode_greedy(&fx.model, &p.prompt, 24, DecodeOptions::with_plan(&noop)).unwrap();
        let same = a.tokens == b.tokens
            && bits(&a.activations.values) == bits(&b.activations.values)
            && a.logits.iter().zip(&b.logits).all(|(x, y)| bits(x) == bits(y));
        c.check(same, || format!("problem {}: no-op plan changed the decode", p.problem_id));
        c.check(b.trigger_log.fired_count() == 0, || "disabled unit fired".into());
        identical += same as usize;
        for layer in 0..4 {
            let shift = attention_shift(&fx.model, &noop, &p.prompt, &a.tokens, Some(layer), DEFAULT_SHIFT_EPS, None)
                .unwrap();
            c.check(shift.is_zero(), || format!("no-op plan shifted attention at layer {layer}"));
        }
    }

    // Drift planted in a layer-1 head and a unit aligned with it: the first
    // firing step must be after onset and nothing before it may move.
    let head = HeadId::new(1, 0);
    let onset = 8;
    let drift = DriftSpec::new(
        vec![PlantedDirection {
            head,
            direction: (0..16).map(|i| ((i * 7 % 5) as f64) - 2.0).collect(),
        }],
        onset,
        3.0,
        DriftSchedule::Constant,
    )
    .unwrap();
    let basis: Vec<f32> = drift.direction(head).unwrap().iter().map(|&x| x as f32).collect();
    let m = Arc::new(ErrorManifold::new(head, basis, vec![0.0; 16], vec![1.0]).unwrap());
    let mut firing_checked = 0;
    let mut shifted_after = 0;
    for (i, p) in prompts[..6].iter().enumerate() {
        let pert = Perturbation {
            drift: Some(drift.clone()),
            noise_std: NOISE,
            noise_seed: trace_noise_seed(&fx.synth, i, 99),
        };
        let clean = decode_greedy(&fx.model, &p.prompt, 24, DecodeOptions::default()).unwrap();
        let probe = SteeringPlan::new("probe", vec![SteeringUnit::new(m.clone(), Threshold::disabled(), 1.0).unwrap()])
            .unwrap();
        let opts = DecodeOptions {
            plan: Some(&probe),
            perturbation: Some(&pert),
            capture_attention: false,
        };
        let scores: Vec<f64> = decode_forced(&fx.model, &p.prompt, &clean.tokens, opts)
            .unwrap()
            .trigger_log
            .records
            .iter()
            .map(|r| r.score_pre)
            .collect();
        let tau = scores[..onset].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let plan = SteeringPlan::new("default", vec![SteeringUnit::new(m.clone(), Threshold::fixed(tau), 1.0).unwrap()])
            .unwrap();
        let shift = attention_shift(&fx.model, &plan, &p.prompt, &clean.tokens, None, DEFAULT_SHIFT_EPS, Some(&pert))
            .unwrap();
        let Some(t_fire) = shift.t_fire else {
            c.failures.push(format!("problem {}: firing plan never fired", p.problem_id));
            continue;
        };
        c.check(t_fire >= onset, || format!("fired at {t_fire}, before onset {onset}"));
        let leaked: Vec<usize> = (0..t_fire).filter(|&t| shift.rows[t].iter().any(|&x| x != 0.0)).collect();
        c.check(leaked.is_empty(), || format!("attention moved before t_fire={t_fire} at steps {leaked:?}"));
        shifted_after += (shift.row_max(t_fire) > 0.0) as usize;
        firing_checked += 1;
    }
    c.check(shifted_after > 0, || "firing plan never moved attention".into());
    c.note(format!(
        "{identical}/8 no-op decodes bit-identical, {firing_checked} firing decodes causal, {shifted_after} shifted at t_fire"
    ));
    c.finish();
}

// ---------------------------------------------------------------- P6

#[test]
fn p6_trajectory_recovery() {
    let _g = serial();
    let mut c = Criterion::new("P6", "trajectory recovery");
    let fx = planted();
    let prompts = synthetic_prompts(&fx.synth, 64);
    let units: Vec<SteeringUnit> = fx
        .manifolds
        .iter()
        .filter(|m| PLANTED.contains(&m.head()))
        .map(|m| SteeringUnit::from_calibrated(m.clone(), 1.0).unwrap())
        .collect();
    let plan = SteeringPlan::new("default", units).unwrap();
    let test_ids = fx.test.problem_ids();
    let mut report = String::new();
    let mut compared = 0;
    for (i, p) in prompts.iter().enumerate().filter(|(_, p)| test_ids.contains(&p.problem_id)) {
        let clean = decode_greedy(&fx.model, &p.prompt, fx.synth.steps, DecodeOptions::default()).unwrap();
        let j = fx.synth.traces_per_problem - 1;
        assert!(synthetic_label(j, fx.synth.traces_per_problem).is_error());
        let pert = Perturbation {
            drift: Some(fx.drift.clone()),
            noise_std: fx.synth.noise_std,
            noise_seed: trace_noise_seed(&fx.synth, i, j),
        };
        let base = DecodeOptions {
            perturbation: Some(&pert),
            ..Default::default()
        };
        let unsteered = decode_forced(&fx.model, &p.prompt, &clean.tokens, base).unwrap();
        let steered = decode_forced(&fx.model, &p.prompt, &clean.tokens, DecodeOptions { plan: Some(&plan), ..base })
            .unwrap();
        let Some(t_fire) = steered.trigger_log.first_fire() else {
            c.failures.push(format!("problem {}: plan never fired", p.problem_id));
            continue;
        };
        for m in fx.manifolds.iter().filter(|m| PLANTED.contains(&m.head())) {
            let rows_u = project_decode(m, &unsteered, &p.problem_id, "unsteered", 4).unwrap();
            let rows_s = project_decode(m, &steered, &p.problem_id, "steered", 4).unwrap();
            let du = mean_distance_after(&rows_u, t_fire).unwrap();
            let ds = mean_distance_after(&rows_s, t_fire).unwrap();
            c.check(ds < du, || {
                format!("problem {} head {}: steered {ds:.3} not below unsteered {du:.3}", p.problem_id, m.head())
            });
            if compared < 2 {
                let _ = write!(report, "{} {}: {du:.2} -> {ds:.2}; ", p.problem_id, m.head());
            }
            compared += 1;
        }
    }
    c.check(compared > 0, || "nothing compared".into());
    c.note(format!("{compared} head-trajectories, e.g. {}", report.trim_end_matches("; ")));
    c.finish();
}

// ---------------------------------------------------------------- P7

#[test]
fn p7_overhead_linear_in_heads() {
    let _g = serial();
    let mut c = Criterion::new("P7", "monitoring overhead");
    let report = bench_overhead(&BenchConfig::default()).unwrap();
    c.check(report.fit.r2 >= 0.9, || format!("R^2 {:.4} < 0.9", report.fit.r2));
    c.note(format!(
        "R^2 {:.4}, {:.2} us/step per head",
        report.fit.r2,
        report.fit.slope * 1e6
    ));
    c.check(c.started.elapsed().as_secs_f64() < 60.0, || "runtime over 60 s".into());
    c.finish();
}

// ---------------------------------------------------------------- P8

#[test]
fn p8_bootstrap() {
    let _g = serial();
    let mut c = Criterion::new("P8", "bootstrap intervals");
    for seed in [0, 1, 42, 12345] {
        let ci = bootstrap_ci(&[true, false], 10_000, seed).unwrap();
        c.check(ci.lower == 0.0 && ci.upper == 1.0, || {
            format!("seed {seed}: [1,0] gave [{}, {}]", ci.lower, ci.upper)
        });
    }
    let outcomes: Vec<bool> = (0..500).map(|i| i < 239).collect();
    let ci = bootstrap_ci(&outcomes, 10_000, 42).unwrap();
    let analytic = 2.0 * 1.959964 * (0.478f64 * 0.522 / 500.0).sqrt();
    let rel = (ci.width() / analytic - 1.0).abs();
    c.check(rel <= 0.10, || format!("width {:.4} vs {analytic:.4}", ci.width()));
    c.check(ci.lower < ci.point && ci.point < ci.upper, || "point outside interval".into());
    c.note(format!(
        "[1,0] -> [0, 1]; 239/500 -> {:.3} [{:.3}, {:.3}], width {:.4} vs {analytic:.4}",
        ci.point,
        ci.lower,
        ci.upper,
        ci.width()
    ));
    c.finish();
}

// ---------------------------------------------------------------- P9

#[test]
fn p9_format_round_trip() {
    let _g = serial();
    let mut c = Criterion::new("P9", "dataset format round trip");
    let mut round_trips = 0;
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let (problems, steps, heads, d) =
            (r.random_range(1..6), r.random_range(1..9), r.random_range(1..4), r.random_range(1..9));
        let ds = dataset_from_fn(problems, 3, steps, heads, d, |_, _, _, _, _| {
            f32::from_bits(r.random_range(0u32..0x7f00_0000)) * if r.random_bool(0.5) { -1.0 } else { 1.0 }
        });
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let same = back.len() == ds.len()
            && ds.traces().iter().zip(back.traces()).all(|(a, b)| {
                a.meta == b.meta
                    && a.heads() == b.heads()
                    && a.values().iter().map(|v| v.to_bits()).eq(b.values().iter().map(|v| v.to_bits()))
            });
        c.check(same, || format!("seed {seed}: dataset changed across write/read"));
        round_trips += same as usize;
    }

    let ds = random_dataset(5, 4, 3, 6);
    let fresh = || {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        dir
    };
    let blob_name = "activations.bin";
    let manifest_name = "manifest.json";
    let mut rejected = 0;
    let mut expect_reject = |c: &mut Criterion, what: &str, mutate: &dyn Fn(&std::path::Path)| {
        let dir = fresh();
        mutate(dir.path());
        match read_dataset(dir.path()) {
            Err(_) => rejected += 1,
            Ok(_) => c.failures.push(format!("{what} was accepted")),
        }
    };
    expect_reject(&mut c, "truncated blob", &|p| {
        let b = std::fs::read(p.join(blob_name)).unwrap();
        std::fs::write(p.join(blob_name), &b[..b.len() - 4]).unwrap();
    });
    expect_reject(&mut c, "blob with a trailing byte", &|p| {
        let mut b = std::fs::read(p.join(blob_name)).unwrap();
        b.push(0);
        std::fs::write(p.join(blob_name), b).unwrap();
    });
    let edit_manifest = |p: &std::path::Path, f: &dyn Fn(&mut serde_json::Value)| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join(manifest_name)).unwrap()).unwrap();
        f(&mut v);
        std::fs::write(p.join(manifest_name), serde_json::to_vec(&v).unwrap()).unwrap();
    };
    expect_reject(&mut c, "wrong head_dim", &|p| edit_manifest(p, &|v| v["dims"]["head_dim"] = 7.into()));
    expect_reject(&mut c, "wrong trace length", &|p| edit_manifest(p, &|v| v["traces"][0]["length"] = 4.into()));
    expect_reject(&mut c, "wrong offset", &|p| edit_manifest(p, &|v| v["traces"][1]["offset_bytes"] = 8.into()));
    expect_reject(&mut c, "future format version", &|p| edit_manifest(p, &|v| v["format_version"] = 2.into()));
    expect_reject(&mut c, "label outside {0, 1}", &|p| edit_manifest(p, &|v| v["traces"][0]["label"] = 2.into()));
    expect_reject(&mut c, "missing blob", &|p| std::fs::remove_file(p.join(blob_name)).unwrap());
    c.note(format!("{round_trips}/10 bit-identical round trips, {rejected}/8 corruptions rejected"));
    c.finish();
}

#[test]
fn calibration_ignores_incorrect_traces() {
    let _g = serial();
    let fx = planted();
    let m = &fx.manifolds[0];
    let all = calibrate_threshold(m, fx.train.traces(), 99.0).unwrap();
    let correct: Vec<_> = fx.train.correct_traces().cloned().collect();
    let only = calibrate_threshold(m, &correct, 99.0).unwrap();
    assert_eq!(all, only);
}
