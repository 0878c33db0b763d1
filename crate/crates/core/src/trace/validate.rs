use serde::Serialize;

use super::{Label, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemFlag {
    MissingCorrectTrace,
    MissingErrorTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemReport {
    pub problem_id: String,
    pub correct: usize,
    pub incorrect: usize,
    pub flags: Vec<ProblemFlag>,
}

impl ProblemReport {
    /// Usable for contrastive fitting: at least one trace of each class.
    pub fn is_contrastive(&self) -> bool {
        self.flags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonFiniteEntry {
    pub trace_id: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub problems: Vec<ProblemReport>,
    pub non_finite: Vec<NonFiniteEntry>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.non_finite.is_empty() && self.problems.iter().all(ProblemReport::is_contrastive)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ProblemReport> {
        self.problems.iter().filter(|p| !p.is_contrastive())
    }

    pub fn contrastive_problems(&self) -> usize {
        self.problems.iter().filter(|p| p.is_contrastive()).count()
    }
}

/// Reports per-problem class counts and any non-finite activations.
///
/// Flagged problems stay in the dataset; fitting skips them.
pub fn validate_dataset(dataset: &TraceDataset) -> ValidationReport {
    let problems = dataset
        .problems()
        .iter()
        .map(|g| {
            let correct = g.count(Label::Correct);
            let incorrect = g.count(Label::Incorrect);
            let mut flags = Vec::new();
            if correct == 0 {
                flags.push(ProblemFlag::MissingCorrectTrace);
            }
            if incorrect == 0 {
                flags.push(ProblemFlag::MissingErrorTrace);
            }
            ProblemReport {
                problem_id: g.problem_id.to_owned(),
                correct,
                incorrect,
                flags,
            }
        })
        .collect();
    let non_finite = dataset
        .traces()
        .iter()
        .filter_map(|t| {
            t.first_non_finite_step().map(|step| NonFiniteEntry {
                trace_id: t.meta.trace_id.clone(),
                step,
            })
        })
        .collect();
    ValidationReport { problems, non_finite }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::testutil::single_head;

    #[test]
    fn mixed_problem_is_clean() {
        let ds = single_head(
            2,
            &[
                ("p", Label::Correct, vec![vec![0.0, 1.0]]),
                ("p", Label::Correct, vec![vec![0.0, 1.0]]),
                ("p", Label::Incorrect, vec![vec![1.0, 1.0]]),
            ],
        );
        let r = validate_dataset(&ds);
        assert!(r.is_clean());
        assert_eq!((r.problems[0].correct, r.problems[0].incorrect), (2, 1));
    }

    #[test]
    fn all_correct_problem_is_flagged() {
        let ds = single_head(1, &[("p", Label::Correct, vec![vec![0.0]])]);
        let r = validate_dataset(&ds);
        assert_eq!(r.problems[0].flags, vec![ProblemFlag::MissingErrorTrace]);
        assert_eq!(r.contrastive_problems(), 0);
    }

    #[test]
    fn nan_is_flagged() {
        let ds = single_head(
            1,
            &[
                ("p", Label::Correct, vec![vec![0.0], vec![f32::NAN]]),
                ("p", Label::Incorrect, vec![vec![0.0]]),
            ],
        );
        let r = validate_dataset(&ds);
        assert!(!r.is_clean());
        assert_eq!(r.non_finite[0].step, 1);
    }
}
