use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcrbind_autograd::GradCheckOptions;
use tcrbind_core::diagnostics::{random_sequence, variant_gradcheck, CHECKED_VARIANTS};
use tcrbind_core::features::{FeatureBank, FeatureSources};
use tcrbind_core::model::checkpoint::{from_bytes, to_bytes};
use tcrbind_core::model::{
    count_parameters, LigandInputs, Model, ModelConfig, ModelParams, Side, Variant,
};

fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<LigandInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = FeatureBank::new(cfg, FeatureSources::default());
    (0..n)
        .map(|_| {
            bank.build(&random_sequence(&mut rng, 3, cfg.context + 3))
                .unwrap()
        })
        .collect()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let opts = GradCheckOptions::default();
    for variant in CHECKED_VARIANTS {
        for masked in [false, true] {
            let base = ModelConfig {
                use_attention_mask: masked,
                ..ModelConfig::tiny()
            };
            let report = variant_gradcheck(variant, &base, 4, &opts).unwrap();
            assert!(
                report.passed,
                "{} (mask {masked}): max rel error {:.3e} at {:?}",
                variant.name(),
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn trained_embedding_variant_gradients() {
    let report = variant_gradcheck(
        Variant::TextOnlyWpe,
        &ModelConfig::tiny(),
        4,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "max rel error {:.3e}", report.max_rel_error);
}

#[test]
fn full_scale_counts() {
    let counts = count_parameters(&ModelConfig::full_scale());
    assert_eq!(counts.pcf_projection, 570_880);
    assert_eq!(counts.cmap_projection, 655_360);
    assert_eq!(counts.self_attention, 8_397_824);
    assert_eq!(counts.ffn, 68_640);
    assert_eq!(counts.head, 3_149_825);
    assert_eq!(counts.total, 22_535_233);
    assert_eq!(
        ModelParams::spec(&ModelConfig::full_scale())
            .leaves()
            .iter()
            .map(|s| s.numel())
            .sum::<usize>(),
        22_535_233
    );
}

#[test]
fn encoders_are_independent() {
    let cfg = Variant::PcfCm.apply(&ModelConfig::tiny());
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    let batch = inputs(&cfg, 3, 1);
    let refs: Vec<_> = batch.iter().collect();
    let before = model.encode(Side::Tcr, &refs).unwrap();
    model.params.epitope = model.params.epitope.map(&mut |t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += 0.37);
        t
    });
    assert_eq!(model.encode(Side::Tcr, &refs).unwrap(), before);
    assert_ne!(model.encode(Side::Epitope, &refs).unwrap(), before);
}

#[test]
fn eval_forward_is_deterministic_and_batch_equivariant() {
    let cfg = Variant::PcfEc.apply(&ModelConfig::tiny());
    let model = Model::new(cfg.clone(), 9).unwrap();
    let tcr = inputs(&cfg, 5, 2);
    let epi = inputs(&cfg, 5, 3);
    let t: Vec<_> = tcr.iter().collect();
    let e: Vec<_> = epi.iter().collect();
    let a = model.predict(&t, &e).unwrap();
    assert_eq!(a, model.predict(&t, &e).unwrap());
    let perm = [3, 0, 4, 1, 2];
    let tp: Vec<_> = perm.iter().map(|&i| t[i]).collect();
    let ep: Vec<_> = perm.iter().map(|&i| e[i]).collect();
    let b = model.predict(&tp, &ep).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert!((b[k] - a[i]).abs() < 1e-12);
    }
    assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn reloaded_checkpoint_reproduces_outputs_bitwise() {
    for variant in Variant::ALL {
        let cfg = variant.apply(&ModelConfig::tiny());
        let model = Model::new(cfg.clone(), 21).unwrap();
        let tcr = inputs(&cfg, 4, 7);
        let epi = inputs(&cfg, 4, 8);
        let t: Vec<_> = tcr.iter().collect();
        let e: Vec<_> = epi.iter().collect();
        let back = from_bytes(&to_bytes(&model)).unwrap();
        let (a, b) = (model.logits(&t, &e).unwrap(), back.logits(&t, &e).unwrap());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn missing_modality_is_reported() {
    let cfg = Variant::CmEc.apply(&ModelConfig::tiny());
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut x = inputs(&cfg, 2, 4);
    x[1].cmap = None;
    let refs: Vec<_> = x.iter().collect();
    let err = model.predict(&refs, &refs).unwrap_err();
    assert!(
        err.to_string().contains("CMAP") || err.to_string().contains("lacks"),
        "{err}"
    );
}
