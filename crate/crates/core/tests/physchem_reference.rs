mod common;

use proptest::prelude::*;
use tcrbind_core::physchem::{self, FEATURE_DIMS};
use tcrbind_core::sequence::{AaSequence, ALPHABET};

fn seq(s: &str) -> AaSequence {
    AaSequence::parse(s).unwrap()
}

#[test]
fn fixture_matches_reference_within_1e6_relative() {
    let (names, rows) = common::physchem_reference();
    assert_eq!(names, physchem::feature_names());
    assert_eq!(rows.len(), 20);
    for (text, want) in rows {
        let got = physchem::featurize(&seq(&text)).combined();
        assert_eq!(got.len(), FEATURE_DIMS);
        for (k, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(
                common::rel_err(*g, *w) <= 1e-6,
                "{text} {}: got {g}, want {w}",
                names[k]
            );
        }
    }
}

#[test]
fn isoelectric_point_zeroes_charge() {
    let (_, rows) = common::physchem_reference();
    for (text, _) in rows {
        let s = seq(&text);
        let pi = physchem::isoelectric_point(&s);
        assert!(physchem::charge(&s, pi).abs() < 1e-4, "{text}: pI {pi}");
    }
}

#[test]
fn charge_non_increasing_in_ph() {
    let (_, rows) = common::physchem_reference();
    for (text, _) in rows {
        let s = seq(&text);
        let mut prev = f64::INFINITY;
        for step in 0..=280 {
            let c = physchem::charge(&s, step as f64 * 0.05);
            assert!(c <= prev + 1e-12, "{text} at pH {}", step as f64 * 0.05);
            prev = c;
        }
    }
}

#[test]
fn homopolymer_descriptors_equal_table_rows() {
    for &r in ALPHABET {
        for len in [1usize, 4, 9] {
            let s = seq(&(r as char).to_string().repeat(len));
            for table in &physchem::tables().descriptors {
                let got = physchem::descriptor_summary(&s, table);
                for (g, w) in got.iter().zip(table.row(r)) {
                    assert!(
                        (g - w).abs() <= 1e-12 * w.abs().max(1.0),
                        "{} {}",
                        table.name,
                        r as char
                    );
                }
            }
        }
    }
    assert_eq!(
        physchem::featurize(&seq("A")).descriptor_part,
        physchem::featurize(&seq("AAAA")).descriptor_part
    );
}

fn sequence_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(0usize..20, 1..30)
        .prop_map(|v| v.into_iter().map(|i| ALPHABET[i] as char).collect())
}

proptest! {
    #[test]
    fn composition_properties_ignore_order(text in sequence_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut chars: Vec<char> = text.chars().collect();
        chars.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: String = chars.into_iter().collect();
        let (a, b) = (seq(&text), seq(&shuffled));
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
        prop_assert!(close(physchem::molecular_weight(&a), physchem::molecular_weight(&b)));
        prop_assert!(close(physchem::hydrophobicity(&a), physchem::hydrophobicity(&b)));
        prop_assert!(close(physchem::charge(&a, 7.0), physchem::charge(&b, 7.0)));
        prop_assert!(close(physchem::aliphatic_index(&a), physchem::aliphatic_index(&b)));
    }

    #[test]
    fn features_finite_and_complete(text in sequence_strategy()) {
        let f = physchem::featurize(&seq(&text)).combined();
        prop_assert_eq!(f.len(), FEATURE_DIMS);
        prop_assert!(f.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn permutation_changes_order_dependent_properties() {
    let (a, b) = (seq("KKKKLLLL"), seq("KLKLKLKL"));
    assert_ne!(
        physchem::instability_index(&a),
        physchem::instability_index(&b)
    );
    assert_ne!(
        physchem::hydrophobic_moment(&a, 100.0),
        physchem::hydrophobic_moment(&b, 100.0)
    );
}
