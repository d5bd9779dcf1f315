//! Minibatch training with per-epoch evaluation, plus evaluation of a
//! frozen model on external pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tcrbind_autograd::{mix_seed, Graph, Tensor};
use thiserror::Error;

use crate::features::{FeatureBank, FeatureError};
use crate::metrics::{Confusion, SetMetrics};
use crate::model::{self, forward, save_checkpoint, Mode, Model, ModelConfig, ModelError};
use crate::optim::{Adam, AdamConfig};
use crate::pairs::PairExample;
use crate::report::{MetricsReport, SplitName};
use crate::split::FoldPlan;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] tcrbind_autograd::TensorError),
    #[error("the training split is empty")]
    EmptyTraining,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Pairs per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            seed: 0,
            adam: AdamConfig::default(),
            eval_batch: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    /// Parameters after the last epoch.
    pub last: Model,
    /// Parameters at the epoch with the best validation MCC.
    pub best: Model,
}

impl TrainOutcome {
    /// Writes `metrics.jsonl`, `last.mmck` and `best.mmck` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.report.write_json_lines(dir.join("metrics.jsonl"))?;
        save_checkpoint(&self.last, dir.join("last.mmck"))?;
        save_checkpoint(&self.best, dir.join("best.mmck"))?;
        Ok(())
    }
}

/// Splits `0..n` into chunks of `size`; a trailing chunk of one joins its
/// predecessor so batch statistics stay defined.
pub fn minibatches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = tail.end;
    }
    out
}

fn labels_of(pairs: &[&PairExample]) -> Vec<u8> {
    pairs.iter().map(|p| p.label).collect()
}

/// Eval-mode logits for `pairs`, batched and computed in parallel.
pub fn score_pairs(
    model: &Model,
    bank: &FeatureBank,
    pairs: &[&PairExample],
    eval_batch: usize,
) -> Result<Vec<f64>, TrainError> {
    let chunks: Vec<Vec<f64>> = pairs
        .par_chunks(eval_batch.max(1))
        .map(|chunk| -> Result<Vec<f64>, TrainError> {
            let mut tcr = Vec::with_capacity(chunk.len());
            let mut epi = Vec::with_capacity(chunk.len());
            for p in chunk {
                tcr.push(
                    bank.get(&p.tcr)
                        .ok_or_else(|| FeatureError::MissingEmbedding(p.tcr.to_string()))?,
                );
                epi.push(
                    bank.get(&p.epitope)
                        .ok_or_else(|| FeatureError::MissingEmbedding(p.epitope.to_string()))?,
                );
            }
            let tcr: Vec<_> = tcr.iter().map(|a| a.as_ref()).collect();
            let epi: Vec<_> = epi.iter().map(|a| a.as_ref()).collect();
            Ok(model.logits(&tcr, &epi)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.concat())
}

fn prepare_bank<'a>(
    bank: &mut FeatureBank,
    pairs: impl IntoIterator<Item = &'a PairExample>,
) -> Result<(), TrainError> {
    let seqs: Vec<_> = pairs
        .into_iter()
        .flat_map(|p| [&p.tcr, &p.epitope])
        .collect();
    bank.prepare(seqs)?;
    Ok(())
}

/// Fits the physicochemical scaler on every distinct training sequence.
fn fit_scaler(model: &mut Model, bank: &FeatureBank, train: &[&PairExample]) {
    let distinct: BTreeMap<&str, &[f64]> = train
        .iter()
        .flat_map(|p| [&p.tcr, &p.epitope])
        .filter_map(|s| bank.get(s))
        .filter_map(|x| Some((x.key.as_str(), x.pcf.as_deref()?)))
        .collect();
    model.buffers.fit_pcf_scaler(distinct.into_values());
}

/// Trains on `fold.train`, evaluating train, valid and test after every epoch.
pub fn train(
    model_config: &ModelConfig,
    examples: &[PairExample],
    fold: &FoldPlan,
    bank: &mut FeatureBank,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let [train_set, valid_set, test_set] = fold.partition(examples);
    if train_set.is_empty() {
        return Err(TrainError::EmptyTraining);
    }
    prepare_bank(bank, examples)?;

    let mut model = Model::new(model_config.clone(), mix_seed(&[cfg.seed, 0]))?;
    if model_config.has(model::Modality::Pcf) {
        fit_scaler(&mut model, bank, &train_set);
    }
    let mut adam = Adam::new(cfg.adam, model.params.leaves());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1]));
    let mut report = MetricsReport::default();
    let mut best: Option<(f64, Model)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for range in minibatches(order.len(), cfg.batch_size) {
            let batch: Vec<&PairExample> = order[range].iter().map(|&i| train_set[i]).collect();
            train_step(
                &mut model,
                &mut adam,
                bank,
                &batch,
                mix_seed(&[cfg.seed, 2, step]),
            )?;
            step += 1;
        }

        for (name, set) in [
            (SplitName::Train, &train_set),
            (SplitName::Valid, &valid_set),
            (SplitName::Test, &test_set),
        ] {
            if set.is_empty() {
                continue;
            }
            let logits = score_pairs(&model, bank, set, cfg.eval_batch)?;
            let metrics = SetMetrics::compute(&logits, &labels_of(set));
            if name == SplitName::Valid && best.as_ref().is_none_or(|(b, _)| metrics.mcc > *b) {
                best = Some((metrics.mcc, model.clone()));
            }
            report.record(epoch, name, metrics);
        }
        log::debug!("epoch {epoch} done");
    }
    report.summarize();
    let best = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(TrainOutcome {
        report,
        last: model,
        best,
    })
}

/// One Adam step on one minibatch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    bank: &FeatureBank,
    batch: &[&PairExample],
    dropout_key: u64,
) -> Result<f64, TrainError> {
    let lookup = |s: &crate::sequence::AaSequence| {
        bank.get(s)
            .map(|a| a.as_ref())
            .ok_or_else(|| FeatureError::MissingEmbedding(s.to_string()))
    };
    let tcr: Vec<_> = batch
        .iter()
        .map(|p| lookup(&p.tcr))
        .collect::<Result<_, _>>()?;
    let epi: Vec<_> = batch
        .iter()
        .map(|p| lookup(&p.epitope))
        .collect::<Result<_, _>>()?;
    let targets: Vec<f64> = batch.iter().map(|p| f64::from(p.label)).collect();

    let mut g = Graph::new();
    let p = forward::bind(&mut g, &model.params, true);
    let out = model::forward(
        &mut g,
        &model.config,
        &p,
        &model.buffers,
        &tcr,
        &epi,
        Mode::Train { dropout_key },
    )?;
    let loss = g.bce_with_logits(out.logits, &targets)?;
    g.backward(loss)?;
    let loss_value = g.value(loss).item();
    let grads: Vec<Option<&Tensor>> = p.leaves().into_iter().map(|&id| g.grad(id)).collect();
    adam.step(model.params.leaves_mut(), &grads);
    if let Some(stats) = &out.batch_stats {
        model.buffers.update_running(stats);
    }
    Ok(loss_value)
}

/// Metrics of a frozen model on external pairs, overall and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalReport {
    pub overall: SetMetrics,
    pub per_class: BTreeMap<String, SetMetrics>,
}

impl ExternalReport {
    /// Sum of the per-class confusion matrices.
    pub fn class_total(&self) -> Confusion {
        self.per_class
            .values()
            .fold(Confusion::default(), |acc, m| acc.merge(m.confusion))
    }
}

/// Pairs without a class are grouped under `"unassigned"` when any pair has one.
pub fn evaluate_external(
    model: &Model,
    pairs: &[PairExample],
    bank: &mut FeatureBank,
    eval_batch: usize,
) -> Result<ExternalReport, TrainError> {
    prepare_bank(bank, pairs)?;
    let refs: Vec<&PairExample> = pairs.iter().collect();
    let logits = score_pairs(model, bank, &refs, eval_batch)?;
    let labels = labels_of(&refs);
    let overall = SetMetrics::compute(&logits, &labels);
    let mut per_class = BTreeMap::new();
    if pairs.iter().any(|p| p.class.is_some()) {
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for (p, &z) in pairs.iter().zip(&logits) {
            let g = groups
                .entry(p.class.clone().unwrap_or_else(|| "unassigned".into()))
                .or_default();
            g.0.push(z);
            g.1.push(p.label);
        }
        for (class, (z, y)) in groups {
            per_class.insert(class, SetMetrics::compute(&z, &y));
        }
    }
    Ok(ExternalReport { overall, per_class })
}
