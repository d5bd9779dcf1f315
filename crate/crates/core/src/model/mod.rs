//! Two-tower multimodal encoder with a `|u − v|` classification head.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

use tcrbind_autograd::{BatchStats, Graph, TensorError};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use config::{EmbeddingMode, Fusion, Modality, ModelConfig, Variant};
pub use forward::{encode_ligand, forward, positional_encoding, ForwardOutput, LigandInputs, Mode};
pub use params::{count_parameters, ModelParams, ParamCounts};

use crate::physchem::FEATURE_DIMS;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence {key:?} lacks its {modality} input")]
    MissingModality { key: String, modality: &'static str },
    #[error("sequence {key:?}: {modality} input has length {found}, expected {expected}")]
    InputShape {
        key: String,
        modality: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("batch sizes differ or are empty: {0} TCRs vs {1} epitopes")]
    BatchMismatch(usize, usize),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-trainable state saved alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBuffers {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Per-feature centering of the physicochemical input.
    pub pcf_mean: Vec<f64>,
    /// Per-feature divisor of the physicochemical input.
    pub pcf_scale: Vec<f64>,
}

impl ModelBuffers {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            running_mean: vec![0.0; cfg.head_hidden],
            running_var: vec![1.0; cfg.head_hidden],
            pcf_mean: vec![0.0; FEATURE_DIMS],
            pcf_scale: vec![1.0; FEATURE_DIMS],
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let unbiased = stats.unbiased_var();
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    /// Standardizes physicochemical inputs with the statistics of `rows`.
    /// Constant features keep a divisor of 1.
    pub fn fit_pcf_scaler<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        for j in 0..FEATURE_DIMS {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.pcf_mean[j] = mean;
            self.pcf_scale[j] = if sd > 1e-12 { sd } else { 1.0 };
        }
    }

    /// Canonical order used by checkpoints.
    pub(crate) fn parts(&self) -> [&Vec<f64>; 4] {
        [
            &self.running_mean,
            &self.running_var,
            &self.pcf_mean,
            &self.pcf_scale,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<tcrbind_autograd::Tensor>,
    pub buffers: ModelBuffers,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            params: ModelParams::init(&config, seed),
            buffers: ModelBuffers::new(&config),
            config,
        })
    }

    /// Eval-mode binding probabilities for aligned TCR/epitope batches.
    pub fn predict(
        &self,
        tcr: &[&LigandInputs],
        epitope: &[&LigandInputs],
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = forward::bind(&mut g, &self.params, false);
        let out = forward(
            &mut g,
            &self.config,
            &p,
            &self.buffers,
            tcr,
            epitope,
            Mode::Eval,
        )?;
        let probs = g.sigmoid(out.logits);
        Ok(g.value(probs).data().to_vec())
    }

    /// Eval-mode pre-sigmoid scores.
    pub fn logits(
        &self,
        tcr: &[&LigandInputs],
        epitope: &[&LigandInputs],
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = forward::bind(&mut g, &self.params, false);
        let out = forward(
            &mut g,
            &self.config,
            &p,
            &self.buffers,
            tcr,
            epitope,
            Mode::Eval,
        )?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Eval-mode pooled representation of one side.
    pub fn encode(&self, side: Side, batch: &[&LigandInputs]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = forward::bind(&mut g, &self.params, false);
        let enc = match side {
            Side::Tcr => &p.tcr,
            Side::Epitope => &p.epitope,
        };
        let out = encode_ligand(&mut g, &self.config, enc, &self.buffers, batch)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Tcr,
    Epitope,
}
