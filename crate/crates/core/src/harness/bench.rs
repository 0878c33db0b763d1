use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{is_triggered, proximity_score, Threshold};
use crate::error::{Error, Result};
use crate::manifold::{DEFAULT_RANK, ErrorManifold};
use crate::trace::HeadId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Numbers of monitored heads to time.
    pub head_counts: Vec<usize>,
    pub k: usize,
    pub head_dim: usize,
    /// Simulated decode steps per timing run.
    pub steps: usize,
    /// Timing runs per head count; the fastest is kept.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            head_counts: vec![1, 2, 4, 8, 16],
            k: DEFAULT_RANK,
            head_dim: 64,
            steps: 2000,
            repeats: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub heads: usize,
    pub seconds_per_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub points: Vec<BenchPoint>,
    pub fit: LinearFit,
}

/// Ordinary least squares `y = slope x + intercept` with its R^2.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// Random orthonormal `k x d` basis by Gram-Schmidt.
fn random_manifold(rng: &mut ChaCha8Rng, head: HeadId, k: usize, d: usize) -> Result<ErrorManifold> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = gaussian(rng, d);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let basis = rows.concat().into_iter().map(|v| v as f32).collect();
    let centroid = gaussian(rng, d).into_iter().map(|v| v as f32).collect();
    ErrorManifold::new(head, basis, centroid, vec![1.0; k])
}

/// Times the per-step monitoring path (proximity score and trigger test
/// for every monitored head) as the number of heads grows.
pub fn bench_overhead(config: &BenchConfig) -> Result<BenchReport> {
    if config.head_counts.len() < 2 || config.head_counts.contains(&0) {
        return Err(Error::InvalidArgument("need at least two positive head counts".into()));
    }
    if config.k == 0 || config.k > config.head_dim || config.steps == 0 || config.repeats == 0 {
        return Err(Error::InvalidArgument("k, head_dim, steps and repeats must be positive with k <= head_dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let max_heads = *config.head_counts.iter().max().expect("non-empty");
    let manifolds = (0..max_heads)
        .map(|h| random_manifold(&mut rng, HeadId::new(0, h), config.k, config.head_dim))
        .collect::<Result<Vec<_>>>()?;
    // A small ring of activations per head keeps the working set in cache so
    // that timings reflect arithmetic, not memory traffic.
    const RING: usize = 16;
    let acts: Vec<Vec<f64>> = (0..max_heads).map(|_| gaussian(&mut rng, RING * config.head_dim)).collect();
    let threshold = Threshold::disabled();

    let mut best = vec![f64::INFINITY; config.head_counts.len()];
    for _ in 0..config.repeats {
        for (slot, &heads) in config.head_counts.iter().enumerate() {
            let start = Instant::now();
            let mut fired = 0usize;
            for step in 0..config.steps {
                let off = (step % RING) * config.head_dim;
                for (m, a) in manifolds[..heads].iter().zip(&acts) {
                    let score = proximity_score(m, black_box(&a[off..off + config.head_dim]))?;
                    fired += usize::from(is_triggered(score, &threshold));
                }
            }
            black_box(fired);
            let per_step = start.elapsed().as_secs_f64() / config.steps as f64;
            best[slot] = best[slot].min(per_step);
        }
    }
    let points: Vec<BenchPoint> = config
        .head_counts
        .iter()
        .zip(&best)
        .map(|(&heads, &seconds_per_step)| BenchPoint { heads, seconds_per_step })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.heads as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds_per_step).collect();
    Ok(BenchReport {
        config: config.clone(),
        fit: linear_fit(&xs, &ys)?,
        points,
    })
}
