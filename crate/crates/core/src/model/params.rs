//! Parameter layout. Every container is generic over its leaf type so one
//! definition serves shape specs, tensors and graph handles, and the
//! canonical ordering used by checkpoints and the optimizer lives in one
//! place.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tcrbind_autograd::Tensor;

use super::config::{EmbeddingMode, Modality, ModelConfig};
use crate::sequence::VOCAB_SIZE;

/// Number of stacked self-attention sublayers per encoder.
pub const ATTENTION_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    /// `[in, out]`.
    pub weight: T,
    /// `[out]`.
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub first: Affine<T>,
    pub second: Affine<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Affine<T>,
    pub key: Affine<T>,
    pub value: Affine<T>,
    pub output: Affine<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `[21, d_model]` lookup table, only when embeddings are trained.
    pub token_embedding: Option<T>,
    pub pcf: Option<Projection<T>>,
    pub cmap: Option<Projection<T>>,
    pub attention: Vec<Attention<T>>,
    pub attention_bias: T,
    pub ffn_in: Affine<T>,
    pub ffn_out: Affine<T>,
    pub norm_gain: T,
    pub norm_shift: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub hidden: Affine<T>,
    pub norm_gain: T,
    pub norm_shift: T,
    pub output: Affine<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tcr: EncoderParams<T>,
    pub epitope: EncoderParams<T>,
    pub head: HeadParams<T>,
}

impl<T> Affine<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Affine<U> {
        Affine {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.weight, &mut self.bias]);
    }
}

impl<T> Projection<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Projection<U> {
        Projection {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        self.first.visit(out);
        self.second.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.first.visit_mut(out);
        self.second.visit_mut(out);
    }
}

impl<T> Attention<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        for a in [&self.query, &self.key, &self.value, &self.output] {
            a.visit(out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for a in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ] {
            a.visit_mut(out);
        }
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_embedding: self.token_embedding.as_ref().map(&mut *f),
            pcf: self.pcf.as_ref().map(|p| p.map(f)),
            cmap: self.cmap.as_ref().map(|p| p.map(f)),
            attention: self.attention.iter().map(|a| a.map(f)).collect(),
            attention_bias: f(&self.attention_bias),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
            norm_gain: f(&self.norm_gain),
            norm_shift: f(&self.norm_shift),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend(self.token_embedding.as_ref());
        if let Some(p) = &self.pcf {
            p.visit(out);
        }
        if let Some(p) = &self.cmap {
            p.visit(out);
        }
        for a in &self.attention {
            a.visit(out);
        }
        out.push(&self.attention_bias);
        self.ffn_in.visit(out);
        self.ffn_out.visit(out);
        out.extend([&self.norm_gain, &self.norm_shift]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend(self.token_embedding.as_mut());
        if let Some(p) = &mut self.pcf {
            p.visit_mut(out);
        }
        if let Some(p) = &mut self.cmap {
            p.visit_mut(out);
        }
        for a in &mut self.attention {
            a.visit_mut(out);
        }
        out.push(&mut self.attention_bias);
        self.ffn_in.visit_mut(out);
        self.ffn_out.visit_mut(out);
        out.extend([&mut self.norm_gain, &mut self.norm_shift]);
    }
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            hidden: self.hidden.map(f),
            norm_gain: f(&self.norm_gain),
            norm_shift: f(&self.norm_shift),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        self.hidden.visit(out);
        out.extend([&self.norm_gain, &self.norm_shift]);
        self.output.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.hidden.visit_mut(out);
        out.extend([&mut self.norm_gain, &mut self.norm_shift]);
        self.output.visit_mut(out);
    }
}

impl<T> ModelParams<T> {
    /// Order: TCR encoder, epitope encoder, head.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tcr: self.tcr.map(&mut f),
            epitope: self.epitope.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.tcr.visit(&mut out);
        self.epitope.visit(&mut out);
        self.head.visit(&mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.tcr.visit_mut(&mut out);
        self.epitope.visit_mut(&mut out);
        self.head.visit_mut(&mut out);
        out
    }
}

impl<T> EncoderParams<T> {
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut out);
        out
    }
}

/// How a leaf is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on ±1/√fan_in.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn affine_spec(inp: usize, out: usize) -> Affine<ParamSpec> {
    Affine {
        weight: ParamSpec {
            shape: vec![inp, out],
            init: Init::FanIn(inp),
        },
        bias: ParamSpec {
            shape: vec![out],
            init: Init::Zeros,
        },
    }
}

fn vector_spec(len: usize, init: Init) -> ParamSpec {
    ParamSpec {
        shape: vec![len],
        init,
    }
}

fn encoder_spec(cfg: &ModelConfig) -> EncoderParams<ParamSpec> {
    let d = cfg.d_model;
    let projection = |inp| Projection {
        first: affine_spec(inp, cfg.proj_hidden),
        second: affine_spec(cfg.proj_hidden, d),
    };
    EncoderParams {
        token_embedding: (cfg.embedding_mode == EmbeddingMode::TrainedFromScratch).then(|| {
            ParamSpec {
                shape: vec![VOCAB_SIZE, d],
                // a lookup is an affine map of a one-hot input
                init: Init::FanIn(1),
            }
        }),
        pcf: cfg.has(Modality::Pcf).then(|| projection(cfg.pcf_len())),
        cmap: cfg.has(Modality::Cmap).then(|| projection(cfg.cmap_len())),
        attention: (0..ATTENTION_LAYERS)
            .map(|_| Attention {
                query: affine_spec(d, d),
                key: affine_spec(d, d),
                value: affine_spec(d, d),
                output: affine_spec(d, d),
            })
            .collect(),
        attention_bias: vector_spec(d, Init::Zeros),
        ffn_in: affine_spec(d, cfg.ffn_hidden),
        ffn_out: affine_spec(cfg.ffn_hidden, d),
        norm_gain: vector_spec(d, Init::Ones),
        norm_shift: vector_spec(d, Init::Zeros),
    }
}

impl ModelParams<ParamSpec> {
    /// The parameter layout implied by `cfg`, without allocating values.
    pub fn spec(cfg: &ModelConfig) -> Self {
        Self {
            tcr: encoder_spec(cfg),
            epitope: encoder_spec(cfg),
            head: HeadParams {
                hidden: affine_spec(3 * cfg.ligand_dim(), cfg.head_hidden),
                norm_gain: vector_spec(cfg.head_hidden, Init::Ones),
                norm_shift: vector_spec(cfg.head_hidden, Init::Zeros),
                output: affine_spec(cfg.head_hidden, 1),
            },
        }
    }

    pub fn instantiate(&self, seed: u64) -> ModelParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.map(|spec| {
            let n = spec.numel();
            let data = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(&spec.shape, data).expect("spec shape is valid")
        })
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        ModelParams::spec(cfg).instantiate(seed)
    }

    pub fn numel(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds a parameter set from tensors listed in canonical order.
    pub fn from_leaves(cfg: &ModelConfig, leaves: Vec<Tensor>) -> Option<Self> {
        let spec = ModelParams::spec(cfg);
        if spec.leaves().len() != leaves.len()
            || spec
                .leaves()
                .iter()
                .zip(&leaves)
                .any(|(s, t)| s.shape != t.shape())
        {
            return None;
        }
        let mut it = leaves.into_iter();
        Some(spec.map(|_| it.next().expect("length checked")))
    }
}

/// Per-block parameter counts. Encoder blocks are per encoder; the
/// total covers both encoders and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub token_embedding: usize,
    pub pcf_projection: usize,
    pub cmap_projection: usize,
    pub self_attention: usize,
    pub ffn: usize,
    pub head: usize,
    pub total: usize,
}

fn sum_specs(leaves: Vec<&ParamSpec>) -> usize {
    leaves.iter().map(|s| s.numel()).sum()
}

fn affine_count(a: &Affine<ParamSpec>) -> usize {
    a.weight.numel() + a.bias.numel()
}

fn projection_count(p: &Option<Projection<ParamSpec>>) -> usize {
    p.as_ref()
        .map_or(0, |p| affine_count(&p.first) + affine_count(&p.second))
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let spec = ModelParams::spec(cfg);
    let enc = &spec.tcr;
    let attention: usize = enc
        .attention
        .iter()
        .map(|a| {
            [&a.query, &a.key, &a.value, &a.output]
                .into_iter()
                .map(affine_count)
                .sum::<usize>()
        })
        .sum();
    let head = &spec.head;
    ParamCounts {
        token_embedding: enc.token_embedding.as_ref().map_or(0, ParamSpec::numel),
        pcf_projection: projection_count(&enc.pcf),
        cmap_projection: projection_count(&enc.cmap),
        self_attention: attention + enc.attention_bias.numel(),
        ffn: affine_count(&enc.ffn_in)
            + affine_count(&enc.ffn_out)
            + enc.norm_gain.numel()
            + enc.norm_shift.numel(),
        head: affine_count(&head.hidden)
            + head.norm_gain.numel()
            + head.norm_shift.numel()
            + affine_count(&head.output),
        total: sum_specs(spec.leaves()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn blocks_partition_total() {
        for v in Variant::ALL {
            let cfg = v.apply(&ModelConfig::tiny());
            let c = count_parameters(&cfg);
            let per_encoder =
                c.token_embedding + c.pcf_projection + c.cmap_projection + c.self_attention + c.ffn;
            assert_eq!(c.total, 2 * per_encoder + c.head, "{v:?}");
            assert_eq!(ModelParams::init(&cfg, 1).numel(), c.total);
        }
    }

    #[test]
    fn init_follows_fan_in_rule() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 5);
        let w = &p.tcr.ffn_in.weight;
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(p.tcr.ffn_in.bias.data().iter().all(|&v| v == 0.0));
        assert!(p.head.norm_gain.data().iter().all(|&v| v == 1.0));
        assert_ne!(p.tcr, p.epitope);
    }

    #[test]
    fn from_leaves_round_trip() {
        let cfg = Variant::PcfCm.apply(&ModelConfig::tiny());
        let p = ModelParams::init(&cfg, 2);
        let leaves: Vec<Tensor> = p.leaves().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_leaves(&cfg, leaves.clone()), Some(p));
        assert_eq!(ModelParams::from_leaves(&cfg, leaves[1..].to_vec()), None);
    }
}
