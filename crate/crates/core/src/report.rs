//! Per-epoch metrics and best-validation-epoch summaries, persisted as
//! JSON lines.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::SetMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: SplitName,
    #[serde(flatten)]
    pub metrics: SetMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Loss,
    Mcc,
    Auc,
}

impl MetricName {
    pub const ALL: [MetricName; 3] = [MetricName::Loss, MetricName::Mcc, MetricName::Auc];

    pub fn read(self, m: &SetMetrics) -> Option<f64> {
        match self {
            MetricName::Loss => Some(m.loss),
            MetricName::Mcc => Some(m.mcc),
            MetricName::Auc => m.auc,
        }
    }

    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            MetricName::Loss => candidate < incumbent,
            _ => candidate > incumbent,
        }
    }
}

/// The epoch that optimizes one validation metric, with the test score at
/// that epoch. Ties keep the earliest epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub summary: MetricName,
    pub best_epoch: usize,
    pub valid: f64,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochRecord>,
    pub summaries: Vec<BestSummary>,
}

impl MetricsReport {
    pub fn record(&mut self, epoch: usize, split: SplitName, metrics: SetMetrics) {
        self.epochs.push(EpochRecord {
            epoch,
            split,
            metrics,
        });
    }

    pub fn at(&self, epoch: usize, split: SplitName) -> Option<&SetMetrics> {
        self.epochs
            .iter()
            .find(|r| r.epoch == epoch && r.split == split)
            .map(|r| &r.metrics)
    }

    /// Recomputes the per-metric summaries from the epoch records.
    pub fn summarize(&mut self) {
        self.summaries = MetricName::ALL
            .into_iter()
            .filter_map(|metric| {
                let mut best: Option<(usize, f64)> = None;
                for r in self.epochs.iter().filter(|r| r.split == SplitName::Valid) {
                    let Some(v) = metric.read(&r.metrics) else {
                        continue;
                    };
                    if best.is_none_or(|(_, b)| metric.better(v, b)) {
                        best = Some((r.epoch, v));
                    }
                }
                let (best_epoch, valid) = best?;
                let test = self
                    .at(best_epoch, SplitName::Test)
                    .and_then(|m| metric.read(m));
                Some(BestSummary {
                    summary: metric,
                    best_epoch,
                    valid,
                    test,
                })
            })
            .collect();
    }

    pub fn summary(&self, metric: MetricName) -> Option<&BestSummary> {
        self.summaries.iter().find(|s| s.summary == metric)
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for s in &self.summaries {
            out.push_str(&serde_json::to_string(s).expect("summary serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_json_lines(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_lines().as_bytes())
    }
}
