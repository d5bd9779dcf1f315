use tcrbind_autograd::{BatchNormMode, BatchStats, Graph, NodeId, Tensor};

use super::config::{EmbeddingMode, Fusion, Modality, ModelConfig};
use super::params::{Affine, Attention, EncoderParams, ModelParams, Projection};
use super::{ModelBuffers, ModelError};
use crate::sequence::ShapedSequence;

pub const NORM_EPS: f64 = 1e-5;

/// Everything the encoder may consume for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LigandInputs {
    pub key: String,
    pub shaped: ShapedSequence,
    /// `context × d_model` token rows, for store or mock embeddings.
    pub text: Option<Vec<f64>>,
    /// Raw 88-component physicochemical vector.
    pub pcf: Option<Vec<f64>>,
    /// Flattened contact map.
    pub cmap: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout keyed by `dropout_key`.
    Train { dropout_key: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch]` pre-sigmoid scores.
    pub logits: NodeId,
    pub tcr: NodeId,
    pub epitope: NodeId,
    /// Head batch-norm statistics in training mode.
    pub batch_stats: Option<BatchStats>,
}

/// Places every leaf on the graph: trainable or constant.
pub fn bind(g: &mut Graph, params: &ModelParams<Tensor>, trainable: bool) -> ModelParams<NodeId> {
    params.map(|t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

fn affine(g: &mut Graph, x: NodeId, a: &Affine<NodeId>) -> Result<NodeId, ModelError> {
    let y = g.matmul(x, a.weight)?;
    Ok(g.add(y, a.bias)?)
}

/// affine → ReLU → affine.
pub fn project(g: &mut Graph, x: NodeId, p: &Projection<NodeId>) -> Result<NodeId, ModelError> {
    let h = affine(g, x, &p.first)?;
    let h = g.relu(h);
    affine(g, h, &p.second)
}

/// Multi-head self-attention over `[batch, rows, d]`. `keep` marks, per
/// batch element and key row, whether the row may be attended to.
pub fn self_attention(
    g: &mut Graph,
    x: NodeId,
    a: &Attention<NodeId>,
    heads: usize,
    keep: Option<&[Vec<bool>]>,
) -> Result<NodeId, ModelError> {
    let shape = g.shape(x).to_vec();
    let (batch, rows, d) = (shape[0], shape[1], shape[2]);
    let width = d / heads;
    let q = affine(g, x, &a.query)?;
    let k = affine(g, x, &a.key)?;
    let v = affine(g, x, &a.value)?;
    let mask: Option<Vec<bool>> = keep.map(|keep| {
        let mut m = Vec::with_capacity(batch * rows * rows);
        for row_keep in keep {
            for _ in 0..rows {
                m.extend_from_slice(row_keep);
            }
        }
        m
    });
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 2, h * width, width)?;
        let kh = g.slice(k, 2, h * width, width)?;
        let vh = g.slice(v, 2, h * width, width)?;
        let kt = g.transpose(kh)?;
        let logits = g.batch_matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / (width as f64).sqrt());
        let weights = match &mask {
            Some(m) => g.masked_softmax(logits, m.clone())?,
            None => g.softmax(logits),
        };
        outs.push(g.batch_matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 2)?
    };
    affine(g, joined, &a.output)
}

/// Stacked attention sublayers with residuals, a learned bias, then the
/// normalized feed-forward sublayer. Shape is preserved.
pub fn encoder_block(
    g: &mut Graph,
    x: NodeId,
    enc: &EncoderParams<NodeId>,
    heads: usize,
    keep: Option<&[Vec<bool>]>,
) -> Result<NodeId, ModelError> {
    let mut h = x;
    for layer in &enc.attention {
        let att = self_attention(g, h, layer, heads, keep)?;
        h = g.add(h, att)?;
    }
    h = g.add(h, enc.attention_bias)?;
    let f = affine(g, h, &enc.ffn_in)?;
    let f = g.relu(f);
    let f = affine(g, f, &enc.ffn_out)?;
    let sum = g.add(h, f)?;
    Ok(g.layer_norm(sum, enc.norm_gain, enc.norm_shift, NORM_EPS)?)
}

/// Sinusoidal position code, `[context, d]` row-major.
pub fn positional_encoding(context: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; context * d];
    for pos in 0..context {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn missing(input: &LigandInputs, modality: &'static str) -> ModelError {
    ModelError::MissingModality {
        key: input.key.clone(),
        modality,
    }
}

fn stack_rows(
    batch: &[&LigandInputs],
    modality: &'static str,
    width: usize,
    pick: impl Fn(&LigandInputs) -> Option<&Vec<f64>>,
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(batch.len() * width);
    for input in batch {
        let row = pick(input).ok_or_else(|| missing(input, modality))?;
        if row.len() != width {
            return Err(ModelError::InputShape {
                key: input.key.clone(),
                modality,
                expected: width,
                found: row.len(),
            });
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Token rows `[batch, context, d]`.
fn embed_text(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderParams<NodeId>,
    batch: &[&LigandInputs],
) -> Result<NodeId, ModelError> {
    let (b, l, d) = (batch.len(), cfg.context, cfg.d_model);
    if let Some(input) = batch.iter().find(|i| i.shaped.len() != l) {
        return Err(ModelError::InputShape {
            key: input.key.clone(),
            modality: "TEXT",
            expected: l,
            found: input.shaped.len(),
        });
    }
    match cfg.embedding_mode {
        EmbeddingMode::TrainedFromScratch => {
            let table = enc.token_embedding.ok_or_else(|| {
                ModelError::InvalidConfig("trained embedding table missing".into())
            })?;
            let ids: Vec<usize> = batch
                .iter()
                .flat_map(|i| i.shaped.tokens.iter().map(|t| t.index()))
                .collect();
            let tokens = g.gather_rows(table, &ids, &[b, l])?;
            let pe = g.constant(Tensor::new(&[l, d], positional_encoding(l, d))?);
            Ok(g.add(tokens, pe)?)
        }
        EmbeddingMode::PretrainedStore | EmbeddingMode::Mock => {
            let rows = stack_rows(batch, "TEXT", l * d, |i| i.text.as_ref())?;
            Ok(g.constant(Tensor::new(&[b, l, d], rows)?))
        }
    }
}

/// Projected modality vectors `[batch, d]`, in canonical order.
fn modality_vectors(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderParams<NodeId>,
    buffers: &ModelBuffers,
    batch: &[&LigandInputs],
) -> Result<Vec<NodeId>, ModelError> {
    let b = batch.len();
    let mut out = Vec::new();
    if cfg.has(Modality::Pcf) {
        let mut rows = stack_rows(batch, "PCF", cfg.pcf_len(), |i| i.pcf.as_ref())?;
        for row in rows.chunks_mut(cfg.pcf_len()) {
            for ((v, m), s) in row
                .iter_mut()
                .zip(&buffers.pcf_mean)
                .zip(&buffers.pcf_scale)
            {
                *v = (*v - m) / s;
            }
        }
        let x = g.constant(Tensor::new(&[b, cfg.pcf_len()], rows)?);
        let p = enc
            .pcf
            .as_ref()
            .ok_or_else(|| ModelError::InvalidConfig("PCF projection missing".into()))?;
        out.push(project(g, x, p)?);
    }
    if cfg.has(Modality::Cmap) {
        let rows = stack_rows(batch, "CMAP", cfg.cmap_len(), |i| i.cmap.as_ref())?;
        let x = g.constant(Tensor::new(&[b, cfg.cmap_len()], rows)?);
        let p = enc
            .cmap
            .as_ref()
            .ok_or_else(|| ModelError::InvalidConfig("CMAP projection missing".into()))?;
        out.push(project(g, x, p)?);
    }
    Ok(out)
}

/// Row-wise mean over the encoder output, or over unmasked rows only.
fn pool(g: &mut Graph, x: NodeId, keep: Option<&[Vec<bool>]>) -> Result<NodeId, ModelError> {
    match keep {
        None => Ok(g.mean(x, 1)?),
        Some(keep) => {
            let shape = g.shape(x).to_vec();
            let (b, n, d) = (shape[0], shape[1], shape[2]);
            let mut w = Vec::with_capacity(b * n);
            for row in keep {
                let count = row.iter().filter(|&&k| k).count().max(1) as f64;
                w.extend(row.iter().map(|&k| if k { 1.0 / count } else { 0.0 }));
            }
            let w = g.constant(Tensor::new(&[b, 1, n], w)?);
            let pooled = g.batch_matmul(w, x)?;
            Ok(g.reshape(pooled, &[b, d])?)
        }
    }
}

/// Pooled representation `[batch, ligand_dim]` of one side of the pair.
pub fn encode_ligand(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &EncoderParams<NodeId>,
    buffers: &ModelBuffers,
    batch: &[&LigandInputs],
) -> Result<NodeId, ModelError> {
    let b = batch.len();
    let d = cfg.d_model;
    let text = embed_text(g, cfg, enc, batch)?;
    let extras = modality_vectors(g, cfg, enc, buffers, batch)?;
    let keep_for = |rows_extra: usize| -> Option<Vec<Vec<bool>>> {
        cfg.use_attention_mask.then(|| {
            batch
                .iter()
                .map(|i| {
                    let mut k = i.shaped.mask.clone();
                    k.extend(std::iter::repeat_n(true, rows_extra));
                    k
                })
                .collect()
        })
    };
    match cfg.fusion {
        Fusion::EarlyConcat => {
            let mut parts = vec![text];
            for e in &extras {
                parts.push(g.reshape(*e, &[b, 1, d])?);
            }
            let fused = if parts.len() == 1 {
                text
            } else {
                g.concat(&parts, 1)?
            };
            let keep = keep_for(extras.len());
            let encoded = encoder_block(g, fused, enc, cfg.heads, keep.as_deref())?;
            pool(g, encoded, keep.as_deref())
        }
        Fusion::LateConcat => {
            let keep = keep_for(0);
            let encoded = encoder_block(g, text, enc, cfg.heads, keep.as_deref())?;
            let pooled = pool(g, encoded, keep.as_deref())?;
            if extras.is_empty() {
                return Ok(pooled);
            }
            let mut parts = vec![pooled];
            parts.extend(extras);
            Ok(g.concat(&parts, 1)?)
        }
    }
}

/// `[u ‖ v ‖ |u − v|]` → affine → batch-norm → dropout → affine, giving
/// `[batch]` logits.
pub fn head_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ModelParams<NodeId>,
    buffers: &ModelBuffers,
    u: NodeId,
    v: NodeId,
    mode: Mode,
) -> Result<(NodeId, Option<BatchStats>), ModelError> {
    let head = &params.head;
    let diff = g.abs_diff(u, v)?;
    let joined = g.concat(&[u, v, diff], 1)?;
    let h = affine(g, joined, &head.hidden)?;
    let bn_mode = match mode {
        Mode::Train { .. } => BatchNormMode::Training,
        Mode::Eval => BatchNormMode::Inference {
            mean: &buffers.running_mean,
            var: &buffers.running_var,
        },
    };
    let (h, stats) = g.batch_norm(h, head.norm_gain, head.norm_shift, NORM_EPS, bn_mode)?;
    let h = match mode {
        Mode::Train { dropout_key } if cfg.dropout_p > 0.0 => {
            g.dropout(h, cfg.dropout_p, dropout_key)?
        }
        _ => h,
    };
    let z = affine(g, h, &head.output)?;
    let b = g.shape(z)[0];
    Ok((g.reshape(z, &[b])?, stats))
}

pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ModelParams<NodeId>,
    buffers: &ModelBuffers,
    tcr: &[&LigandInputs],
    epitope: &[&LigandInputs],
    mode: Mode,
) -> Result<ForwardOutput, ModelError> {
    if tcr.len() != epitope.len() || tcr.is_empty() {
        return Err(ModelError::BatchMismatch(tcr.len(), epitope.len()));
    }
    let u = encode_ligand(g, cfg, &params.tcr, buffers, tcr)?;
    let v = encode_ligand(g, cfg, &params.epitope, buffers, epitope)?;
    let (logits, batch_stats) = head_logits(g, cfg, params, buffers, u, v, mode)?;
    Ok(ForwardOutput {
        logits,
        tcr: u,
        epitope: v,
        batch_stats,
    })
}
