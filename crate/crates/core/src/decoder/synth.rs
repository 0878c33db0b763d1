//! Planted drift and synthetic trace generation.
//!
//! A synthetic problem is a random prompt. Its correct traces are the clean
//! greedy continuation replayed with small isotropic noise on every head
//! output; its incorrect traces replay the same tokens with, in addition, a
//! planted unit direction added to the target heads from the onset step on.
//! Noise and drift are injected at the same hook point steering uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{decode_forced, decode_greedy, DecodeOptions, Token, ToyDecoder};
use crate::error::{Error, Result};
use crate::trace::{HeadId, Label, ModelDims, TraceDataset};

/// Default growth rate of compounding drift.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DriftSchedule {
    Constant,
    /// `m_t = m_0 (1 + gamma (t - onset))`.
    Compounding { gamma: f64 },
}

impl Default for DriftSchedule {
    fn default() -> Self {
        DriftSchedule::Compounding { gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDirection {
    pub head: HeadId,
    /// Unit vector in head-output space.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub targets: Vec<PlantedDirection>,
    /// First decode step carrying drift.
    pub onset: usize,
    /// Magnitude at the onset step.
    pub magnitude: f64,
    pub schedule: DriftSchedule,
}

impl DriftSpec {
    /// Normalizes each direction; fails on zero or non-finite vectors.
    pub fn new(targets: Vec<PlantedDirection>, onset: usize, magnitude: f64, schedule: DriftSchedule) -> Result<Self> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("drift magnitude {magnitude} must be finite and >= 0")));
        }
        let mut seen = std::collections::HashSet::new();
        let targets = targets
            .into_iter()
            .map(|mut t| {
                if !seen.insert(t.head) {
                    return Err(Error::InvalidArgument(format!("head {} planted twice", t.head)));
                }
                let norm = t.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::InvalidArgument(format!("drift direction for {} is degenerate", t.head)));
                }
                t.direction.iter_mut().for_each(|v| *v /= norm);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            targets,
            onset,
            magnitude,
            schedule,
        })
    }

    /// One random unit direction per target head.
    pub fn random(heads: &[HeadId], head_dim: usize, onset: usize, magnitude: f64, schedule: DriftSchedule, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = heads
            .iter()
            .map(|&head| PlantedDirection {
                head,
                direction: (0..head_dim)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            })
            .collect();
        Self::new(targets, onset, magnitude, schedule)
    }

    pub fn heads(&self) -> Vec<HeadId> {
        self.targets.iter().map(|t| t.head).collect()
    }

    pub fn direction(&self, head: HeadId) -> Option<&[f64]> {
        self.targets.iter().find(|t| t.head == head).map(|t| t.direction.as_slice())
    }

    /// Drift magnitude at `step` (zero before onset).
    pub fn magnitude_at(&self, step: usize) -> f64 {
        if step < self.onset {
            return 0.0;
        }
        match self.schedule {
            DriftSchedule::Constant => self.magnitude,
            DriftSchedule::Compounding { gamma } => self.magnitude * (1.0 + gamma * (step - self.onset) as f64),
        }
    }

    fn validate(&self, dims: &ModelDims) -> Result<()> {
        for t in &self.targets {
            if !dims.contains(t.head) {
                return Err(Error::UnknownHead(t.head));
            }
            if t.direction.len() != dims.head_dim {
                return Err(Error::DimensionMismatch {
                    expected: dims.head_dim,
                    found: t.direction.len(),
                });
            }
        }
        Ok(())
    }
}

/// Noise and drift applied at the hook point, before steering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub drift: Option<DriftSpec>,
    /// Per-component standard deviation of Gaussian noise on every head.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Perturbation {
    pub fn noise_only(noise_std: f64, noise_seed: u64) -> Self {
        Self {
            drift: None,
            noise_std,
            noise_seed,
        }
    }

    pub(crate) fn validate(&self, dims: &ModelDims, _steps: usize) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise std {} must be finite and >= 0", self.noise_std)));
        }
        if let Some(d) = &self.drift {
            d.validate(dims)?;
        }
        Ok(())
    }

    pub(crate) fn noise_stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.noise_seed)
    }

    /// Adds noise to every head of `layer`, then planted drift to targeted heads.
    pub(crate) fn apply(&self, rng: &mut ChaCha8Rng, step: usize, layer: usize, head_dim: usize, heads: &mut [f64]) {
        if self.noise_std > 0.0 {
            for v in heads.iter_mut() {
                *v += self.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        }
        if let Some(drift) = &self.drift {
            let m = drift.magnitude_at(step);
            if m == 0.0 {
                return;
            }
            for t in drift.targets.iter().filter(|t| t.head.layer == layer) {
                let block = &mut heads[t.head.head * head_dim..(t.head.head + 1) * head_dim];
                for (v, u) in block.iter_mut().zip(&t.direction) {
                    *v += m * u;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub problems: usize,
    pub traces_per_problem: usize,
    pub prompt_len: usize,
    /// Decode steps per trace.
    pub steps: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            problems: 40,
            traces_per_problem: 4,
            prompt_len: 6,
            steps: 32,
            noise_std: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub problem_id: String,
    pub prompt: Vec<Token>,
}

/// Deterministic 64-bit mix of a base seed with two indices.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random prompts, one per problem.
pub fn synthetic_prompts(cfg: &SynthConfig, vocab: usize) -> Vec<SyntheticProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, u64::MAX));
    (0..cfg.problems)
        .map(|i| SyntheticProblem {
            problem_id: format!("p{i:03}"),
            prompt: (0..cfg.prompt_len).map(|_| rng.random_range(0..vocab as Token)).collect(),
        })
        .collect()
}

/// Label of the `j`-th trace of a problem with `s` traces: the first
/// `ceil(s / 2)` are correct.
pub fn synthetic_label(j: usize, s: usize) -> Label {
    if j < s.div_ceil(2) {
        Label::Correct
    } else {
        Label::Incorrect
    }
}

/// Noise seed of trace `j` of problem `i`.
pub fn trace_noise_seed(cfg: &SynthConfig, i: usize, j: usize) -> u64 {
    derive_seed(cfg.seed, i as u64 + 1, j as u64 + 1)
}

/// Generates a labeled dataset monitoring every head of `model`.
pub fn generate_synthetic_dataset(model: &ToyDecoder, cfg: &SynthConfig, drift: &DriftSpec) -> Result<TraceDataset> {
    if cfg.traces_per_problem < 2 {
        return Err(Error::InvalidArgument("need at least 2 traces per problem".into()));
    }
    if cfg.problems == 0 || cfg.prompt_len == 0 || cfg.steps == 0 {
        return Err(Error::InvalidArgument("problems, prompt length and steps must be positive".into()));
    }
    if drift.onset >= cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "drift onset {} outside trace length {}",
            drift.onset, cfg.steps
        )));
    }
    let dims = model.config().dims();
    drift.validate(&dims)?;

    let problems = synthetic_prompts(cfg, model.config().vocab);
    let per_problem: Vec<Vec<_>> = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let clean = decode_greedy(model, &p.prompt, cfg.steps, DecodeOptions::default())?;
            (0..cfg.traces_per_problem)
                .map(|j| {
                    let label = synthetic_label(j, cfg.traces_per_problem);
                    let perturbation = Perturbation {
                        drift: label.is_error().then(|| drift.clone()),
                        noise_std: cfg.noise_std,
                        noise_seed: trace_noise_seed(cfg, i, j),
                    };
                    let opts = DecodeOptions {
                        perturbation: Some(&perturbation),
                        ..Default::default()
                    };
                    let run = decode_forced(model, &p.prompt, &clean.tokens, opts)?;
                    run.activations.to_trace(&p.problem_id, &format!("{}-t{j}", p.problem_id), label)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    TraceDataset::new(dims, dims.all_heads(), per_problem.into_iter().flatten().collect())
}
