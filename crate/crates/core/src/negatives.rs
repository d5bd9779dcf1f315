//! Balanced negatives from decoy TCRs.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pairs::PairExample;
use crate::sequence::AaSequence;

/// Consecutive colliding draws tolerated before giving up.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NegativeError {
    #[error("decoy pool is empty")]
    EmptyDecoys,
    #[error("positive #{0} is labelled 0")]
    NotPositive(usize),
    #[error("{MAX_REDRAWS} consecutive decoys for epitope {0} collided with known positives")]
    ExhaustedDecoys(String),
}

/// Returns the positives followed by one negative per positive, each
/// pairing the positive's epitope with a uniformly drawn decoy TCR.
pub fn sample_negatives(
    positives: &[PairExample],
    decoys: &[AaSequence],
    seed: u64,
) -> Result<Vec<PairExample>, NegativeError> {
    if decoys.is_empty() {
        return Err(NegativeError::EmptyDecoys);
    }
    if let Some(i) = positives.iter().position(|p| p.label != 1) {
        return Err(NegativeError::NotPositive(i));
    }
    let known: HashSet<(&str, &str)> = positives
        .iter()
        .map(|p| (p.epitope.as_str(), p.tcr.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = positives.to_vec();
    out.reserve(positives.len());
    for p in positives {
        let mut tries = 0;
        let decoy = loop {
            let d = &decoys[rng.gen_range(0..decoys.len())];
            if !known.contains(&(p.epitope.as_str(), d.as_str())) {
                break d;
            }
            tries += 1;
            if tries == MAX_REDRAWS {
                return Err(NegativeError::ExhaustedDecoys(p.epitope.to_string()));
            }
        };
        out.push(PairExample {
            epitope: p.epitope.clone(),
            tcr: decoy.clone(),
            label: 0,
            class: p.class.clone(),
        });
    }
    Ok(out)
}
