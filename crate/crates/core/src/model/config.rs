use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::contact::flat_len;
use crate::physchem::FEATURE_DIMS;
use crate::sequence::DEFAULT_CONTEXT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fusion {
    /// Modality vectors join the text tokens before the encoder.
    EarlyConcat,
    /// Modality vectors are appended to the pooled encoder output.
    LateConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Text,
    Pcf,
    Cmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingMode {
    /// Token rows come from an embedding store.
    PretrainedStore,
    /// Token rows come from the deterministic mock embedder.
    Mock,
    /// Learned lookup table plus sinusoidal positions.
    TrainedFromScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub context: usize,
    pub heads: usize,
    pub proj_hidden: usize,
    pub ffn_hidden: usize,
    /// Width of the classification head's hidden layer.
    pub head_hidden: usize,
    pub fusion: Fusion,
    pub modalities: Vec<Modality>,
    pub embedding_mode: EmbeddingMode,
    pub dropout_p: f64,
    pub use_attention_mask: bool,
    /// Seed for [`EmbeddingMode::Mock`] token rows.
    #[serde(default)]
    pub mock_seed: u64,
}

/// Named architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    TextOnly,
    TextOnlyWpe,
    PcfEc,
    PcfLc,
    CmEc,
    CmLc,
    PcfCm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::TextOnly,
        Variant::TextOnlyWpe,
        Variant::PcfEc,
        Variant::PcfLc,
        Variant::CmEc,
        Variant::CmLc,
        Variant::PcfCm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::TextOnlyWpe => "text-only-wpe",
            Variant::PcfEc => "pcf-ec",
            Variant::PcfLc => "pcf-lc",
            Variant::CmEc => "cm-ec",
            Variant::CmLc => "cm-lc",
            Variant::PcfCm => "pcf-cm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Applies the variant's fusion, modalities and embedding mode to `base`.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        use Modality::*;
        let (fusion, modalities, trained) = match self {
            Variant::TextOnly => (Fusion::EarlyConcat, vec![Text], false),
            Variant::TextOnlyWpe => (Fusion::EarlyConcat, vec![Text], true),
            Variant::PcfEc => (Fusion::EarlyConcat, vec![Text, Pcf], false),
            Variant::PcfLc => (Fusion::LateConcat, vec![Text, Pcf], false),
            Variant::CmEc => (Fusion::EarlyConcat, vec![Text, Cmap], false),
            Variant::CmLc => (Fusion::LateConcat, vec![Text, Cmap], false),
            Variant::PcfCm => (Fusion::EarlyConcat, vec![Text, Pcf, Cmap], false),
        };
        let embedding_mode = if trained {
            EmbeddingMode::TrainedFromScratch
        } else if base.embedding_mode == EmbeddingMode::TrainedFromScratch {
            EmbeddingMode::Mock
        } else {
            base.embedding_mode
        };
        ModelConfig {
            fusion,
            modalities,
            embedding_mode,
            ..base.clone()
        }
    }
}

impl ModelConfig {
    /// Full-scale dimensions with all modalities fused early.
    pub fn full_scale() -> Self {
        Self {
            d_model: 1024,
            context: DEFAULT_CONTEXT,
            heads: 2,
            proj_hidden: 512,
            ffn_hidden: 32,
            head_hidden: 1024,
            fusion: Fusion::EarlyConcat,
            modalities: vec![Modality::Text, Modality::Pcf, Modality::Cmap],
            embedding_mode: EmbeddingMode::PretrainedStore,
            dropout_p: 0.3,
            use_attention_mask: false,
            mock_seed: 0,
        }
    }

    /// Small dimensions for gradient checks and quick experiments.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            context: 6,
            heads: 2,
            proj_hidden: 8,
            ffn_hidden: 4,
            head_hidden: 16,
            embedding_mode: EmbeddingMode::Mock,
            ..Self::full_scale()
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Number of non-text modalities.
    pub fn extra_modalities(&self) -> usize {
        usize::from(self.has(Modality::Pcf)) + usize::from(self.has(Modality::Cmap))
    }

    pub fn cmap_len(&self) -> usize {
        flat_len(self.context)
    }

    pub fn pcf_len(&self) -> usize {
        FEATURE_DIMS
    }

    /// Rows entering the encoder.
    pub fn encoder_rows(&self) -> usize {
        match self.fusion {
            Fusion::EarlyConcat => self.context + self.extra_modalities(),
            Fusion::LateConcat => self.context,
        }
    }

    /// Width of one pooled ligand representation.
    pub fn ligand_dim(&self) -> usize {
        match self.fusion {
            Fusion::EarlyConcat => self.d_model,
            Fusion::LateConcat => (1 + self.extra_modalities()) * self.d_model,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if !self.has(Modality::Text) {
            return bad("TEXT modality must be enabled".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort_by_key(|m| *m as u8);
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("duplicate modality".into());
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("context", self.context),
            ("heads", self.heads),
            ("proj_hidden", self.proj_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Length-prefixed form: u32 little-endian byte count, then JSON.
    pub fn to_prefixed_bytes(&self) -> Vec<u8> {
        let json = self.to_json();
        let mut out = (json.len() as u32).to_le_bytes().to_vec();
        out.extend_from_slice(json.as_bytes());
        out
    }

    /// Accepts either the length-prefixed form or plain JSON text.
    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() >= 4 {
            let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
            if n + 4 == bytes.len() {
                let text = std::str::from_utf8(&bytes[4..])
                    .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                return Self::from_json(text);
            }
        }
        let text =
            std::str::from_utf8(bytes).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        Self::from_json(text)
    }
}
