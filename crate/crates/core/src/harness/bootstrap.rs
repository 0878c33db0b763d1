use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::percentile_sorted;
use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

/// 95% percentile bootstrap interval of a success rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Resamples `outcomes` with replacement `resamples` times and returns the
/// 2.5th and 97.5th percentiles of the resampled means.
pub fn bootstrap_ci(outcomes: &[bool], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    if resamples == 0 {
        return Err(Error::InvalidArgument("at least one resample is required".into()));
    }
    let n = outcomes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        point: outcomes.iter().filter(|&&o| o).count() as f64 / n as f64,
        lower: percentile_sorted(&means, 2.5)?,
        upper: percentile_sorted(&means, 97.5)?,
        resamples,
        seed,
    })
}
