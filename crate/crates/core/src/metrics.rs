//! Classification metrics: confusion counts, MCC and rank-based AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold applied to probabilities for confusion counts.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("AUC needs both classes, but every label is {0}")]
    SingleClass(u8),
    #[error("AUC needs at least one score")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Counts predictions at [`THRESHOLD`]; a probability of exactly 0.5 is positive.
    pub fn from_predictions(probs: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            c.record(p >= THRESHOLD, y == 1);
        }
        c
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn mcc(&self) -> f64 {
        mcc(self.tp, self.tn, self.fp, self.fn_)
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let denom = factors.iter().product::<f64>().sqrt();
    ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
}

/// Mann–Whitney statistic as an exact rational: `2U` over twice the
/// number of positive/negative pairs. Ties count one half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankStatistic {
    pub twice_u: u64,
    pub pairs: u64,
}

impl RankStatistic {
    pub fn value(&self) -> f64 {
        self.twice_u as f64 / (2 * self.pairs) as f64
    }
}

/// Computes `2U` from average ranks. Sorting makes this `O(n log n)`.
pub fn rank_statistic(scores: &[f64], labels: &[u8]) -> Result<RankStatistic, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass(labels[0]));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the 1-based rank sum of positives; a tie group spanning ranks
    // lo+1..=hi contributes lo+1+hi per member, i.e. twice its average rank.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(RankStatistic {
        twice_u,
        pairs: positives * negatives,
    })
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    rank_statistic(scores, labels).map(|r| r.value())
}

/// Numerically stable mean binary cross-entropy computed from logits.
pub fn bce_from_logits(logits: &[f64], labels: &[u8]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Metrics of one evaluated set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub loss: f64,
    pub mcc: f64,
    /// Absent when the set holds a single class.
    pub auc: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
}

impl SetMetrics {
    pub fn compute(logits: &[f64], labels: &[u8]) -> Self {
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let confusion = Confusion::from_predictions(&probs, labels);
        Self {
            loss: bce_from_logits(logits, labels),
            mcc: confusion.mcc(),
            auc: auc(&probs, labels).ok(),
            confusion,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_anchors() {
        assert_eq!(mcc(5, 5, 0, 0), 1.0);
        assert_eq!(mcc(1, 1, 1, 1), 0.0);
        assert!((mcc(3, 4, 1, 2) - 10.0 / 600f64.sqrt()).abs() < 1e-15);
        assert_eq!(mcc(4, 0, 0, 0), 0.0);
    }

    #[test]
    fn auc_anchors() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass(1)));
    }

    #[test]
    fn constant_half_predictor_scores_zero_mcc() {
        let probs = [0.5; 10];
        let labels = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let c = Confusion::from_predictions(&probs, &labels);
        assert_eq!(c.total(), 10);
        assert_eq!(c.mcc(), 0.0);
    }

    #[test]
    fn bce_matches_naive_form() {
        let logits: [f64; 5] = [-3.0, -0.2, 0.0, 1.5, 4.0];
        let labels = [0, 1, 1, 0, 1];
        let naive: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 5.0;
        assert!((bce_from_logits(&logits, &labels) - naive).abs() < 1e-12);
    }
}
