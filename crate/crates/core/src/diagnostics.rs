//! End-to-end gradient checks and synthetic datasets for sanity runs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tcrbind_autograd::{
    grad_check, mix_seed, GradCheckOptions, GradCheckReport, NodeId, TensorError,
};

use crate::features::{FeatureBank, FeatureSources};
use crate::model::{self, Mode, Model, ModelConfig, ModelError, ModelParams, Variant};
use crate::pairs::PairExample;
use crate::physchem::{charge, DEFAULT_PH};
use crate::sequence::{AaSequence, ALPHABET};
use crate::split::FoldPlan;
use crate::store::{MatrixRecord, MatrixStore, StoreKind};

/// The six variants covered by the end-to-end gradient check.
pub const CHECKED_VARIANTS: [Variant; 6] = [
    Variant::TextOnly,
    Variant::PcfEc,
    Variant::PcfLc,
    Variant::CmEc,
    Variant::CmLc,
    Variant::PcfCm,
];

pub fn random_sequence(rng: &mut impl Rng, min_len: usize, max_len: usize) -> AaSequence {
    let len = rng.gen_range(min_len..=max_len);
    let text: String = (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect();
    AaSequence::parse(&text).expect("alphabet residues")
}

fn to_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            msg: other.to_string(),
        },
    }
}

/// Finite-difference check of the training loss (batch norm on batch
/// statistics, a fixed dropout mask) with respect to every parameter.
pub fn variant_gradcheck(
    variant: Variant,
    base: &ModelConfig,
    batch: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let cfg = variant.apply(base);
    let mut model = Model::new(cfg.clone(), mix_seed(&[opts.seed, 11]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, 12]));
    // Lengths straddle the context so both truncation and padding occur.
    let span = (cfg.context.saturating_sub(2).max(1), cfg.context + 2);
    let tcrs: Vec<AaSequence> = (0..batch)
        .map(|_| random_sequence(&mut rng, span.0, span.1))
        .collect();
    let epis: Vec<AaSequence> = (0..batch)
        .map(|_| random_sequence(&mut rng, span.0, span.1))
        .collect();
    let bank = FeatureBank::new(&cfg, FeatureSources::default());
    let tcr_in = tcrs
        .iter()
        .map(|s| bank.build(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let epi_in = epis
        .iter()
        .map(|s| bank.build(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    model.buffers.fit_pcf_scaler(
        tcr_in
            .iter()
            .chain(&epi_in)
            .filter_map(|x| x.pcf.as_deref()),
    );
    let tcr: Vec<_> = tcr_in.iter().collect();
    let epi: Vec<_> = epi_in.iter().collect();
    let targets: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    let spec = ModelParams::spec(&cfg);
    let leaves: Vec<_> = model.params.leaves().into_iter().cloned().collect();
    let dropout_key = mix_seed(&[opts.seed, 13]);

    let report = grad_check(
        |g, ids: &[NodeId]| {
            let mut it = ids.iter().copied();
            let p = spec.map(|_| it.next().expect("one id per leaf"));
            let out = model::forward(
                g,
                &cfg,
                &p,
                &model.buffers,
                &tcr,
                &epi,
                Mode::Train { dropout_key },
            )
            .map_err(to_tensor_error)?;
            g.bce_with_logits(out.logits, &targets)
        },
        &leaves,
        opts,
    )?;
    Ok(report)
}

/// `n` random pairs with balanced random labels.
pub fn random_pairs(n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            PairExample::new(
                random_sequence(&mut rng, 8, 11),
                random_sequence(&mut rng, 10, 16),
                (i % 2) as u8,
            )
        })
        .collect()
}

/// A plan that trains on every epitope of `examples` and holds nothing out.
pub fn train_everything(examples: &[PairExample]) -> FoldPlan {
    FoldPlan {
        train: examples.iter().map(|e| e.epitope.to_string()).collect(),
        valid: BTreeSet::new(),
        test: BTreeSet::new(),
    }
}

/// Pairs whose label is the sign of the epitope's net charge at neutral
/// pH. Epitopes are distinct, balanced across the two signs and keep
/// `|charge| ≥ margin`; TCRs are random.
pub fn charge_sign_pairs(n_epitopes: usize, margin: f64, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let half = n_epitopes / 2;
    while pos.len() < half || neg.len() < n_epitopes - half {
        let ep = random_sequence(&mut rng, 8, 11);
        let z = charge(&ep, DEFAULT_PH);
        if z.abs() < margin || !seen.insert(ep.to_string()) {
            continue;
        }
        let bucket = if z > 0.0 { &mut pos } else { &mut neg };
        let limit = if z > 0.0 { half } else { n_epitopes - half };
        if bucket.len() < limit {
            bucket.push(ep);
        }
    }
    pos.into_iter()
        .map(|e| (e, 1u8))
        .chain(neg.into_iter().map(|e| (e, 0u8)))
        .map(|(e, y)| PairExample::new(e, random_sequence(&mut rng, 10, 16), y))
        .collect()
}

/// An embedding store with an independent random matrix for every
/// sequence in `pairs`, so token rows carry no residue information.
pub fn random_text_store(
    pairs: &[PairExample],
    d_model: usize,
    context: usize,
    seed: u64,
) -> MatrixStore {
    let keys: BTreeSet<&str> = pairs
        .iter()
        .flat_map(|p| [p.tcr.as_str(), p.epitope.as_str()])
        .collect();
    let scale = 1.0 / (d_model as f64).sqrt();
    let records = keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
            let data = (0..context * d_model)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect();
            MatrixRecord::new(key, context, d_model, data).expect("finite random rows")
        })
        .collect();
    MatrixStore::new(StoreKind::Embeddings, records).expect("distinct keys")
}
