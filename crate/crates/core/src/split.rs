//! Epitope-disjoint fold plans.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tcrbind_autograd::mix_seed;
use thiserror::Error;

use crate::pairs::PairExample;

pub const DEFAULT_FOLDS: usize = 10;
/// Share of non-test epitopes held out for validation.
pub const VALID_FRACTION: f64 = 0.1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("{found} distinct epitopes cannot fill {folds} folds")]
    TooFewEpitopes { found: usize, folds: usize },
    #[error("fold {fold} out of range for a {folds}-fold plan")]
    NoSuchFold { fold: usize, folds: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl FoldPlan {
    pub fn part_of(&self, epitope: &str) -> Option<Part> {
        if self.train.contains(epitope) {
            Some(Part::Train)
        } else if self.valid.contains(epitope) {
            Some(Part::Valid)
        } else if self.test.contains(epitope) {
            Some(Part::Test)
        } else {
            None
        }
    }

    /// Routes every example to its epitope's part. Unknown epitopes are dropped.
    pub fn partition<'a>(&self, examples: &'a [PairExample]) -> [Vec<&'a PairExample>; 3] {
        let mut out: [Vec<&PairExample>; 3] = Default::default();
        for ex in examples {
            match self.part_of(ex.epitope.as_str()) {
                Some(Part::Train) => out[0].push(ex),
                Some(Part::Valid) => out[1].push(ex),
                Some(Part::Test) => out[2].push(ex),
                None => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_count: usize,
    /// Epitope → test fold index.
    pub assignments: BTreeMap<String, usize>,
    pub folds: Vec<FoldPlan>,
}

impl SplitPlan {
    pub fn fold(&self, i: usize) -> Result<&FoldPlan, SplitError> {
        self.folds.get(i).ok_or(SplitError::NoSuchFold {
            fold: i,
            folds: self.fold_count,
        })
    }
}

/// Shuffles distinct epitopes under `seed` and deals them round-robin into
/// folds. Fold `i` tests on its own epitopes; the rest are shuffled again
/// and split by epitope into train and valid.
pub fn make_splits(
    examples: &[PairExample],
    fold_count: usize,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    let distinct: BTreeSet<&str> = examples.iter().map(|e| e.epitope.as_str()).collect();
    if fold_count == 0 || distinct.len() < fold_count {
        return Err(SplitError::TooFewEpitopes {
            found: distinct.len(),
            folds: fold_count,
        });
    }
    let mut epitopes: Vec<&str> = distinct.into_iter().collect();
    epitopes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignments = BTreeMap::new();
    for (i, e) in epitopes.iter().enumerate() {
        assignments.insert(e.to_string(), i % fold_count);
    }

    let folds = (0..fold_count)
        .map(|fold| {
            let test: BTreeSet<String> = epitopes
                .iter()
                .enumerate()
                .filter(|(i, _)| i % fold_count == fold)
                .map(|(_, e)| e.to_string())
                .collect();
            let mut rest: Vec<&str> = epitopes
                .iter()
                .enumerate()
                .filter(|(i, _)| i % fold_count != fold)
                .map(|(_, e)| *e)
                .collect();
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
                seed,
                fold as u64,
            ])));
            let n_valid = valid_count(rest.len());
            FoldPlan {
                valid: rest[..n_valid].iter().map(|e| e.to_string()).collect(),
                train: rest[n_valid..].iter().map(|e| e.to_string()).collect(),
                test,
            }
        })
        .collect();

    Ok(SplitPlan {
        fold_count,
        assignments,
        folds,
    })
}

/// Rounded validation share, at least one epitope whenever two remain.
fn valid_count(rest: usize) -> usize {
    if rest < 2 {
        return 0;
    }
    ((rest as f64 * VALID_FRACTION).round() as usize).clamp(1, rest - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::AaSequence;

    fn examples_with(n: usize) -> Vec<PairExample> {
        let letters = b"ACDEFGHIKLMNPQRSTVWY";
        (0..n)
            .map(|i| {
                let ep: String = [
                    letters[i % 20],
                    letters[(i / 20) % 20],
                    letters[(i / 400) % 20],
                    b'K',
                ]
                .iter()
                .map(|&b| b as char)
                .collect();
                PairExample::new(
                    AaSequence::parse(&ep).unwrap(),
                    AaSequence::parse("CASSF").unwrap(),
                    1,
                )
            })
            .collect()
    }

    #[test]
    fn fold_sizes_follow_round_robin() {
        let plan = make_splits(&examples_with(982), 10, 3).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![99, 99, 98, 98, 98, 98, 98, 98, 98, 98]);
        for f in &plan.folds {
            assert_eq!(f.train.len() + f.valid.len() + f.test.len(), 982);
            assert_eq!(f.valid.len(), 88);
        }
    }

    #[test]
    fn one_epitope_per_fold() {
        let plan = make_splits(&examples_with(10), 10, 0).unwrap();
        assert!(plan
            .folds
            .iter()
            .all(|f| f.test.len() == 1 && f.valid.len() == 1 && f.train.len() == 8));
    }

    #[test]
    fn too_few() {
        assert_eq!(
            make_splits(&examples_with(9), 10, 0),
            Err(SplitError::TooFewEpitopes {
                found: 9,
                folds: 10
            })
        );
    }
}
