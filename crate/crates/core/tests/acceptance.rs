//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed:
//! `cargo test -p tcrbind-core --test acceptance`.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcrbind_autograd::{operator_suite, GradCheckOptions};
use tcrbind_core::contact::{pad_and_flatten, unflatten, ContactMap};
use tcrbind_core::diagnostics::{
    charge_sign_pairs, random_pairs, random_sequence, random_text_store, train_everything,
    variant_gradcheck, CHECKED_VARIANTS,
};
use tcrbind_core::features::{FeatureBank, FeatureSources};
use tcrbind_core::metrics::{auc, mcc, rank_statistic};
use tcrbind_core::model::checkpoint::{from_bytes, to_bytes};
use tcrbind_core::model::{count_parameters, EmbeddingMode, Model, ModelConfig, Variant};
use tcrbind_core::negatives::sample_negatives;
use tcrbind_core::pairs::PairExample;
use tcrbind_core::physchem;
use tcrbind_core::report::{MetricName, SplitName};
use tcrbind_core::sequence::{AaSequence, ALPHABET};
use tcrbind_core::split::make_splits;
use tcrbind_core::store::{mock_embed, MatrixRecord, MatrixStore, StoreKind};
use tcrbind_core::train::{train, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seq(s: &str) -> AaSequence {
    AaSequence::parse(s).unwrap()
}

fn parameter_counts() -> Outcome {
    let c = count_parameters(&ModelConfig::full_scale());
    let expected = [
        ("PCF projection", c.pcf_projection, 570_880),
        ("CMAP projection", c.cmap_projection, 655_360),
        ("self-attention", c.self_attention, 8_397_824),
        ("encoder FFN", c.ffn, 68_640),
        ("final projection", c.head, 3_149_825),
        ("total", c.total, 22_535_233),
    ];
    for (name, got, want) in expected {
        ensure(got == want, || format!("{name}: {got} != {want}"))?;
    }
    Ok(format!("total {}", c.total))
}

fn gradients() -> Outcome {
    let opts = GradCheckOptions::default();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for op in operator_suite(7, &opts).map_err(|e| e.to_string())? {
        ensure(op.report.passed, || {
            format!(
                "operator {} rel error {:.2e}",
                op.name, op.report.max_rel_error
            )
        })?;
        worst = worst.max(op.report.max_rel_error);
        coords += op.report.coordinates_checked;
    }
    for v in CHECKED_VARIANTS {
        let r = variant_gradcheck(v, &ModelConfig::tiny(), 4, &opts).map_err(|e| e.to_string())?;
        ensure(r.passed, || {
            format!(
                "{} rel error {:.2e} at {:?}",
                v.name(),
                r.max_rel_error,
                r.worst
            )
        })?;
        worst = worst.max(r.max_rel_error);
        coords += r.coordinates_checked;
    }
    Ok(format!(
        "max rel error {worst:.2e} over {coords} coordinates"
    ))
}

fn physicochemical() -> Outcome {
    let (names, rows) = common::physchem_reference();
    ensure(names == physchem::feature_names(), || {
        "feature names differ".into()
    })?;
    ensure(rows.len() == 20, || format!("{} fixture rows", rows.len()))?;
    let mut worst: f64 = 0.0;
    for (text, want) in &rows {
        let got = physchem::featurize(&seq(text)).combined();
        ensure(got.len() == 88, || {
            format!("{text}: {} components", got.len())
        })?;
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            let e = common::rel_err(*g, *w);
            ensure(e <= 1e-6, || format!("{text} {}: {g} vs {w}", names[k]))?;
            worst = worst.max(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &r in ALPHABET {
        let homo = seq(&(r as char).to_string().repeat(7));
        for table in &physchem::tables().descriptors {
            let got = physchem::descriptor_summary(&homo, table);
            ensure(
                got.iter()
                    .zip(table.row(r))
                    .all(|(g, w)| (g - w).abs() <= 1e-12 * w.abs().max(1.0)),
                || format!("homopolymer {} {}", r as char, table.name),
            )?;
        }
        for _ in 0..5 {
            let mut chars: Vec<char> = random_sequence(&mut rng, 5, 20).as_str().chars().collect();
            chars.push(r as char);
            let a = seq(&chars.iter().collect::<String>());
            chars.shuffle(&mut rng);
            let b = seq(&chars.iter().collect::<String>());
            let (fa, fb) = (physchem::featurize(&a), physchem::featurize(&b));
            let close = |x: &f64, y: &f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
            ensure(
                fa.descriptor_part
                    .iter()
                    .zip(&fb.descriptor_part)
                    .all(|(x, y)| close(x, y)),
                || format!("descriptors of {a} and {b} differ"),
            )?;
            for (name, f) in [
                (
                    "molecular weight",
                    physchem::molecular_weight as fn(&AaSequence) -> f64,
                ),
                ("hydrophobicity", physchem::hydrophobicity),
                ("aliphatic index", physchem::aliphatic_index),
                ("isoelectric point", physchem::isoelectric_point),
            ] {
                ensure(close(&f(&a), &f(&b)), || {
                    format!("{name} of {a} and {b} differ")
                })?;
            }
        }
    }
    Ok(format!("20 fixtures, max rel error {worst:.2e}"))
}

fn contact_maps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=22);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(0.0..10.0);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let map = ContactMap::from_row_major(n, n, &m).map_err(|e| e.to_string())?;
        let flat = pad_and_flatten(&map, 22);
        ensure(flat.len() == 253, || {
            format!("trial {trial}: length {}", flat.len())
        })?;
        let (canvas, back) = unflatten(&flat).map_err(|e| e.to_string())?;
        ensure(canvas == 22 && back == map.padded(22), || {
            format!("trial {trial}: round trip differs")
        })?;
        for i in 0..22 {
            for j in 0..22 {
                let want = if i < n && j < n { m[i * n + j] } else { 0.0 };
                ensure(back[i * 22 + j] == want, || {
                    format!("trial {trial}: ({i},{j})")
                })?;
            }
        }
    }
    Ok("1000 maps, length 253, exact round trip".into())
}

fn brute_mcc(probs: &[f64], labels: &[u8]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fn_) = (0i64, 0i64, 0i64, 0i64);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= 0.5, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let num = (tp * tn - fp * fn_) as f64;
    num / factors.iter().map(|&f| (f as f64).sqrt()).product::<f64>()
}

fn metric_oracles() -> Outcome {
    ensure(
        (mcc(3, 4, 1, 2) - 10.0 / 600f64.sqrt()).abs() <= 1e-12,
        || "10/sqrt(600) anchor".into(),
    )?;
    ensure(
        auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]) == Ok(0.75),
        || "0.75 anchor".into(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.gen_range(2..=50);
        // Coarse scores force ties.
        let probs: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..=10) as f64 / 10.0)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let c = tcrbind_core::metrics::Confusion::from_predictions(&probs, &labels);
        let got = c.mcc();
        let want = brute_mcc(&probs, &labels);
        ensure((got - want).abs() <= 1e-12, || {
            format!("trial {trial}: mcc {got} vs {want}")
        })?;

        let (mut twice_wins, mut pairs) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice_wins += match probs[i].partial_cmp(&probs[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let r = rank_statistic(&probs, &labels).map_err(|e| e.to_string())?;
        ensure(r.twice_u == twice_wins && r.pairs == pairs, || {
            format!(
                "trial {trial}: 2U {}/{} vs {twice_wins}/{pairs}",
                r.twice_u, r.pairs
            )
        })?;
        let exact = twice_wins as f64 / (2 * pairs) as f64;
        ensure(auc(&probs, &labels) == Ok(exact), || {
            format!("trial {trial}: auc")
        })?;
    }
    Ok("1000 random sets agree with brute force".into())
}

fn tiny_train_config() -> ModelConfig {
    Variant::PcfCm.apply(&ModelConfig::tiny())
}

fn protocol() -> Outcome {
    // Splits.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let positives: Vec<PairExample> = (0..400)
        .map(|_| {
            let ep = random_sequence(&mut rng, 8, 11);
            PairExample::new(ep, random_sequence(&mut rng, 10, 16), 1)
        })
        .collect();
    let epitopes: BTreeSet<String> = positives.iter().map(|p| p.epitope.to_string()).collect();
    for seed in 0..20 {
        let plan = make_splits(&positives, 10, seed).map_err(|e| e.to_string())?;
        for (i, f) in plan.folds.iter().enumerate() {
            ensure(
                f.train.is_disjoint(&f.valid)
                    && f.train.is_disjoint(&f.test)
                    && f.valid.is_disjoint(&f.test),
                || format!("seed {seed} fold {i} overlaps"),
            )?;
            let union: BTreeSet<String> = f
                .train
                .iter()
                .chain(&f.valid)
                .chain(&f.test)
                .cloned()
                .collect();
            ensure(union == epitopes, || {
                format!("seed {seed} fold {i} misses epitopes")
            })?;
        }
        ensure(
            epitopes
                .iter()
                .all(|e| plan.folds[plan.assignments[e]].test.contains(e)),
            || format!("seed {seed}: assignments disagree with test folds"),
        )?;
    }

    // Negatives: a small decoy pool that overlaps the positive TCRs forces re-draws.
    let mut decoys: Vec<AaSequence> = (0..30).map(|_| random_sequence(&mut rng, 10, 16)).collect();
    decoys.extend(positives.iter().take(20).map(|p| p.tcr.clone()));
    let known: HashSet<(String, String)> = positives
        .iter()
        .map(|p| (p.epitope.to_string(), p.tcr.to_string()))
        .collect();
    let all = sample_negatives(&positives, &decoys, 8).map_err(|e| e.to_string())?;
    ensure(all.len() == 2 * positives.len(), || {
        format!("{} pairs", all.len())
    })?;
    ensure(
        all.iter().filter(|p| p.label == 1).count() == positives.len(),
        || "unbalanced".into(),
    )?;
    ensure(
        all.iter()
            .filter(|p| p.label == 0)
            .all(|p| !known.contains(&(p.epitope.to_string(), p.tcr.to_string()))),
        || "a negative equals a known positive".into(),
    )?;

    // Reproducibility.
    let data = sample_negatives(&positives[..60], &decoys, 9).map_err(|e| e.to_string())?;
    let plan = make_splits(&data, 10, 1).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed: 4,
        ..Default::default()
    };
    let cfg = tiny_train_config();
    let run = || {
        let mut bank = FeatureBank::new(&cfg, FeatureSources::default());
        train(&cfg, &data, &plan.folds[0], &mut bank, &tc).map(|o| o.report.to_json_lines())
    };
    let (a, b) = (
        run().map_err(|e| e.to_string())?,
        run().map_err(|e| e.to_string())?,
    );
    ensure(a == b, || {
        "training reports differ between identical runs".into()
    })?;
    Ok(format!(
        "20 plans disjoint, {} balanced pairs, {} identical report lines",
        all.len(),
        a.lines().count()
    ))
}

fn learning_sanity() -> Outcome {
    // (a) memorize 64 random pairs.
    let pairs = random_pairs(64, 1);
    let cfg = Variant::TextOnly.apply(&ModelConfig {
        d_model: 32,
        context: 22,
        proj_hidden: 16,
        ffn_hidden: 32,
        head_hidden: 32,
        ..ModelConfig::tiny()
    });
    let mut bank = FeatureBank::new(&cfg, FeatureSources::default());
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 64,
        seed: 1,
        ..Default::default()
    };
    let out = train(&cfg, &pairs, &train_everything(&pairs), &mut bank, &tc)
        .map_err(|e| e.to_string())?;
    let reached = out
        .report
        .epochs
        .iter()
        .find(|r| r.split == SplitName::Train && r.metrics.loss < 0.05 && r.metrics.mcc == 1.0)
        .map(|r| r.epoch);
    let Some(overfit_epoch) = reached else {
        let last = out.report.epochs.last().map(|r| r.metrics);
        return Err(format!(
            "overfit not reached in {} epochs, last {last:?}",
            tc.epochs
        ));
    };

    // (b) labels follow the sign of epitope charge; token rows are random per sequence.
    let pairs = charge_sign_pairs(3000, 1.0, 5);
    let base = ModelConfig {
        d_model: 16,
        context: 12,
        proj_hidden: 16,
        ffn_hidden: 16,
        head_hidden: 16,
        embedding_mode: EmbeddingMode::PretrainedStore,
        ..ModelConfig::tiny()
    };
    let store = Arc::new(random_text_store(&pairs, base.d_model, base.context, 9));
    let plan = make_splits(&pairs, 10, 3).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 12,
        batch_size: 128,
        seed: 2,
        ..Default::default()
    };
    let mut best = Vec::new();
    for variant in [Variant::PcfEc, Variant::TextOnly] {
        let cfg = variant.apply(&base);
        let mut bank = FeatureBank::new(
            &cfg,
            FeatureSources {
                embeddings: Some(store.clone()),
                contact_maps: None,
            },
        );
        let out = train(&cfg, &pairs, &plan.folds[0], &mut bank, &tc).map_err(|e| e.to_string())?;
        let s = out
            .report
            .summary(MetricName::Mcc)
            .ok_or("no validation records")?;
        best.push(s.valid);
    }
    ensure(best[0] >= 0.8, || {
        format!("PCF-EC best valid MCC {:.3} < 0.8", best[0])
    })?;
    ensure(best[1] < 0.2, || {
        format!("text-only best valid MCC {:.3} >= 0.2", best[1])
    })?;
    Ok(format!(
        "overfit at epoch {overfit_epoch}; best valid MCC PCF-EC {:.3}, text-only {:.3}",
        best[0], best[1]
    ))
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let records: Vec<MatrixRecord> = (0..100)
        .map(|i| {
            let s = random_sequence(&mut rng, 5, 25);
            let mut r = mock_embed(&s.shape(22), 24, i);
            r.key = format!("{}-{i}", s.as_str());
            r
        })
        .collect();
    let store =
        MatrixStore::new(StoreKind::Embeddings, records.clone()).map_err(|e| e.to_string())?;
    let bytes = store.to_bytes();
    let back = MatrixStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == bytes, || "store bytes differ".into())?;
    ensure(
        back.records().iter().zip(&records).all(|(a, b)| {
            a.key == b.key
                && a.data
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(b.data.iter().map(|v| v.to_bits()))
        }),
        || "store records differ".into(),
    )?;

    let cfg = tiny_train_config();
    let model = Model::new(cfg.clone(), 77).map_err(|e| e.to_string())?;
    let ckpt = to_bytes(&model);
    let reloaded = from_bytes(&ckpt).map_err(|e| e.to_string())?;
    ensure(to_bytes(&reloaded) == ckpt, || {
        "checkpoint bytes differ".into()
    })?;
    let bank = FeatureBank::new(&cfg, FeatureSources::default());
    let tcr: Vec<_> = (0..6)
        .map(|_| bank.build(&random_sequence(&mut rng, 8, 18)).unwrap())
        .collect();
    let epi: Vec<_> = (0..6)
        .map(|_| bank.build(&random_sequence(&mut rng, 8, 12)).unwrap())
        .collect();
    let (t, e): (Vec<_>, Vec<_>) = (tcr.iter().collect(), epi.iter().collect());
    let a = model.logits(&t, &e).map_err(|e| e.to_string())?;
    let b = reloaded.logits(&t, &e).map_err(|e| e.to_string())?;
    ensure(
        a.iter()
            .map(|v| v.to_bits())
            .eq(b.iter().map(|v| v.to_bits())),
        || "reloaded forward differs".into(),
    )?;
    Ok(format!(
        "100 records, {} checkpoint bytes, identical logits",
        ckpt.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("parameter counts", parameter_counts),
        ("gradient correctness", gradients),
        ("physicochemical oracle", physicochemical),
        ("contact-map arithmetic", contact_maps),
        ("metric oracles", metric_oracles),
        ("protocol invariants", protocol),
        ("learning sanity", learning_sanity),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
