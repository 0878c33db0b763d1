use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TraceDataset;
use crate::error::{Error, Result};

/// Problem-level partition: every trace of a problem lands on one side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Shuffles problem ids with a seeded ChaCha8 stream and cuts at
/// `round(train_fraction * n)`, clamped so each side keeps at least one problem.
pub fn split_by_problem(dataset: &TraceDataset, train_fraction: f64, seed: u64) -> Result<ProblemSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut ids = dataset.problem_ids();
    let n = ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 problems to split, found {n}"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok(ProblemSplit {
        train: ids.into_iter().collect(),
        test: test.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::testutil::single_head;
    use crate::trace::Label;

    fn dataset(problems: usize) -> TraceDataset {
        let names: Vec<String> = (0..problems).map(|i| format!("p{i}")).collect();
        let rows: Vec<(&str, Label, Vec<Vec<f32>>)> = names
            .iter()
            .flat_map(|p| {
                [
                    (p.as_str(), Label::Correct, vec![vec![1.0]]),
                    (p.as_str(), Label::Incorrect, vec![vec![2.0]]),
                ]
            })
            .collect();
        single_head(1, &rows)
    }

    #[test]
    fn seventy_thirty_on_ten_problems() {
        let s = split_by_problem(&dataset(10), 0.7, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        assert!(s.train.is_disjoint(&s.test));
    }

    #[test]
    fn two_problems_half_split() {
        let s = split_by_problem(&dataset(2), 0.5, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
    }

    #[test]
    fn extreme_fraction_keeps_one_per_side() {
        let s = split_by_problem(&dataset(5), 0.01, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 4));
        let s = split_by_problem(&dataset(5), 0.99, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 1));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ds = dataset(30);
        assert_eq!(split_by_problem(&ds, 0.7, 42).unwrap(), split_by_problem(&ds, 0.7, 42).unwrap());
        assert_ne!(split_by_problem(&ds, 0.7, 42).unwrap(), split_by_problem(&ds, 0.7, 43).unwrap());
    }

    #[test]
    fn rejects_single_problem_and_bad_fraction() {
        assert!(split_by_problem(&dataset(1), 0.5, 0).is_err());
        assert!(split_by_problem(&dataset(4), 1.0, 0).is_err());
        assert!(split_by_problem(&dataset(4), 0.0, 0).is_err());
    }
}
