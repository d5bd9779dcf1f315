use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcrbind_core::diagnostics::{random_pairs, random_sequence, train_everything};
use tcrbind_core::features::{FeatureBank, FeatureSources};
use tcrbind_core::metrics::{auc, mcc, SetMetrics};
use tcrbind_core::model::{Model, ModelConfig, Variant};
use tcrbind_core::negatives::sample_negatives;
use tcrbind_core::pairs::PairExample;
use tcrbind_core::report::{MetricName, SplitName};
use tcrbind_core::split::make_splits;
use tcrbind_core::train::{evaluate_external, train, TrainConfig};

proptest! {
    #[test]
    fn mcc_symmetries(tp in 0u64..40, tn in 0u64..40, fp in 0u64..40, fn_ in 0u64..40) {
        prop_assume!(tp + tn + fp + fn_ >= 1);
        let m = mcc(tp, tn, fp, fn_);
        prop_assert!((-1.0..=1.0).contains(&m));
        prop_assert!((m - mcc(tn, tp, fn_, fp)).abs() < 1e-12);
        prop_assert!((m + mcc(fn_, fp, tn, tp)).abs() < 1e-12);
    }

    #[test]
    fn auc_in_unit_interval_and_flips(scores in prop::collection::vec(0u8..8, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = scores.iter().map(|_| rand::Rng::gen_range(&mut rng, 0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let a = auc(&s, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn splits_are_epitope_disjoint(n in 10usize..80, folds in 2usize..11, seed in any::<u64>()) {
        prop_assume!(n >= folds);
        let pairs = random_pairs(n, seed);
        let distinct: HashSet<&str> = pairs.iter().map(|p| p.epitope.as_str()).collect();
        prop_assume!(distinct.len() >= folds);
        let plan = make_splits(&pairs, folds, seed).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        prop_assert!(sizes[sizes.len() - 1] - sizes[0] <= 1);
        for f in &plan.folds {
            prop_assert!(f.train.is_disjoint(&f.test) && f.valid.is_disjoint(&f.test) && f.train.is_disjoint(&f.valid));
            prop_assert_eq!(f.train.len() + f.valid.len() + f.test.len(), distinct.len());
            let [tr, va, te] = f.partition(&pairs);
            prop_assert_eq!(tr.len() + va.len() + te.len(), pairs.len());
        }
    }

    #[test]
    fn negatives_are_balanced_and_novel(n in 1usize..60, pool in 1usize..20, seed in any::<u64>()) {
        let positives: Vec<PairExample> = random_pairs(n, seed)
            .into_iter()
            .map(|mut p| { p.label = 1; p })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let decoys: Vec<_> = (0..pool).map(|_| random_sequence(&mut rng, 10, 16)).collect();
        let out = sample_negatives(&positives, &decoys, seed).unwrap();
        prop_assert_eq!(out.len(), 2 * n);
        prop_assert_eq!(out.iter().filter(|p| p.label == 1).count(), n);
        let known: HashSet<(&str, &str)> = positives.iter().map(|p| (p.epitope.as_str(), p.tcr.as_str())).collect();
        for p in out.iter().filter(|p| p.label == 0) {
            prop_assert!(!known.contains(&(p.epitope.as_str(), p.tcr.as_str())));
            prop_assert!(decoys.contains(&p.tcr));
        }
    }
}

#[test]
fn perfect_predictions_score_one() {
    let labels = [1, 0, 0, 1, 1, 0];
    let logits: Vec<f64> = labels
        .iter()
        .map(|&y| if y == 1 { 3.0 } else { -3.0 })
        .collect();
    let m = SetMetrics::compute(&logits, &labels);
    assert_eq!((m.mcc, m.auc), (1.0, Some(1.0)));
    assert_eq!(m.confusion.total(), 6);
}

fn small_dataset() -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let positives: Vec<PairExample> = (0..40)
        .map(|_| {
            PairExample::new(
                random_sequence(&mut rng, 8, 10),
                random_sequence(&mut rng, 10, 14),
                1,
            )
        })
        .collect();
    let decoys: Vec<_> = (0..25).map(|_| random_sequence(&mut rng, 10, 14)).collect();
    sample_negatives(&positives, &decoys, 3).unwrap()
}

#[test]
fn best_epoch_bookkeeping() {
    let data = small_dataset();
    let plan = make_splits(&data, 5, 0).unwrap();
    let cfg = Variant::PcfEc.apply(&ModelConfig::tiny());
    let mut bank = FeatureBank::new(&cfg, FeatureSources::default());
    let tc = TrainConfig {
        epochs: 6,
        batch_size: 16,
        seed: 3,
        ..Default::default()
    };
    let out = train(&cfg, &data, &plan.folds[1], &mut bank, &tc).unwrap();
    let report = &out.report;
    assert_eq!(report.epochs.len(), 18);
    for r in &report.epochs {
        let c = r.metrics.confusion;
        let size = plan.folds[1].partition(&data)[r.split as usize].len() as u64;
        assert_eq!(c.total(), size);
    }
    let s = report.summary(MetricName::Mcc).unwrap();
    let valid_max = report
        .epochs
        .iter()
        .filter(|r| r.split == SplitName::Valid)
        .map(|r| r.metrics.mcc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(s.valid, valid_max);
    assert_eq!(
        s.test,
        Some(report.at(s.best_epoch, SplitName::Test).unwrap().mcc)
    );

    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path()).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 18 + report.summaries.len());
    assert!(dir.path().join("best.mmck").exists());
}

#[test]
fn training_is_reproducible() {
    let data = small_dataset();
    let cfg = Variant::CmLc.apply(&ModelConfig::tiny());
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 11,
        ..Default::default()
    };
    let run = || {
        let mut bank = FeatureBank::new(&cfg, FeatureSources::default());
        train(&cfg, &data, &train_everything(&data), &mut bank, &tc).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.report, b.report);
    assert_eq!(a.last, b.last);
}

#[test]
fn external_per_class_counts_partition_the_total() {
    let mut data = small_dataset();
    for (i, p) in data.iter_mut().enumerate() {
        p.class = (i % 3 != 0).then(|| {
            if i % 2 == 0 {
                "MHCI".into()
            } else {
                "MHCII".into()
            }
        });
    }
    let cfg = Variant::PcfCm.apply(&ModelConfig::tiny());
    let model = Model::new(cfg.clone(), 4).unwrap();
    let mut bank = FeatureBank::new(&cfg, FeatureSources::default());
    let report = evaluate_external(&model, &data, &mut bank, 16).unwrap();
    assert_eq!(report.per_class.len(), 3);
    assert_eq!(report.class_total(), report.overall.confusion);
    assert_eq!(report.overall.confusion.total(), data.len() as u64);
}
