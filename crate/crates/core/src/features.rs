//! Per-sequence encoder inputs assembled from stores, the mock embedder and
//! the physicochemical featurizer. Results are cached by sequence.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::contact::{pad_and_flatten, separation_map};
use crate::model::{EmbeddingMode, LigandInputs, Modality, ModelConfig};
use crate::physchem::featurize;
use crate::sequence::AaSequence;
use crate::store::{mock_embed, MatrixStore, StoreError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no embedding record for sequence {0:?}")]
    MissingEmbedding(String),
    #[error("no contact map for sequence {0:?}")]
    MissingContactMap(String),
    #[error("embedding for {key:?} has width {found}, model expects {expected}")]
    EmbeddingWidth {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Optional on-disk sources. Both are keyed by the full sequence string.
#[derive(Debug, Clone, Default)]
pub struct FeatureSources {
    pub embeddings: Option<Arc<MatrixStore>>,
    pub contact_maps: Option<Arc<MatrixStore>>,
}

#[derive(Debug, Clone)]
pub struct FeatureBank {
    config: ModelConfig,
    sources: FeatureSources,
    cache: HashMap<String, Arc<LigandInputs>>,
}

impl FeatureBank {
    pub fn new(config: &ModelConfig, sources: FeatureSources) -> Self {
        Self {
            config: config.clone(),
            sources,
            cache: HashMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Builds inputs for one sequence without touching the cache.
    pub fn build(&self, seq: &AaSequence) -> Result<LigandInputs, FeatureError> {
        let cfg = &self.config;
        let key = seq.as_str().to_string();
        let shaped = seq.shape(cfg.context);
        let text = match cfg.embedding_mode {
            EmbeddingMode::TrainedFromScratch => None,
            EmbeddingMode::Mock => {
                Some(mock_embed(&shaped, cfg.d_model, cfg.mock_seed).shaped(&shaped))
            }
            EmbeddingMode::PretrainedStore => {
                let record = self
                    .sources
                    .embeddings
                    .as_ref()
                    .and_then(|s| s.get(&key))
                    .ok_or_else(|| FeatureError::MissingEmbedding(key.clone()))?;
                if record.cols != cfg.d_model {
                    return Err(FeatureError::EmbeddingWidth {
                        key,
                        expected: cfg.d_model,
                        found: record.cols,
                    });
                }
                Some(record.shaped(&shaped))
            }
        };
        let pcf = cfg.has(Modality::Pcf).then(|| featurize(seq).combined());
        let cmap = if cfg.has(Modality::Cmap) {
            let stored = self.sources.contact_maps.as_ref().and_then(|s| s.get(&key));
            let map = match stored {
                Some(record) => record.to_contact_map()?,
                None if cfg.embedding_mode == EmbeddingMode::PretrainedStore => {
                    return Err(FeatureError::MissingContactMap(key))
                }
                None => separation_map(seq.raw_length()),
            };
            Some(pad_and_flatten(&map, cfg.context))
        } else {
            None
        };
        Ok(LigandInputs {
            key,
            shaped,
            text,
            pcf,
            cmap,
        })
    }

    /// Featurizes every uncached sequence in parallel.
    pub fn prepare<'a>(
        &mut self,
        seqs: impl IntoIterator<Item = &'a AaSequence>,
    ) -> Result<(), FeatureError> {
        let mut todo: Vec<&AaSequence> = seqs
            .into_iter()
            .filter(|s| !self.cache.contains_key(s.as_str()))
            .collect();
        todo.sort();
        todo.dedup();
        let built: Vec<LigandInputs> = todo
            .par_iter()
            .map(|s| self.build(s))
            .collect::<Result<_, _>>()?;
        for inputs in built {
            self.cache.insert(inputs.key.clone(), Arc::new(inputs));
        }
        Ok(())
    }

    pub fn get(&self, seq: &AaSequence) -> Option<&Arc<LigandInputs>> {
        self.cache.get(seq.as_str())
    }

    /// Cached inputs, building and caching on a miss.
    pub fn inputs(&mut self, seq: &AaSequence) -> Result<Arc<LigandInputs>, FeatureError> {
        if let Some(hit) = self.cache.get(seq.as_str()) {
            return Ok(hit.clone());
        }
        let built = Arc::new(self.build(seq)?);
        self.cache.insert(built.key.clone(), built.clone());
        Ok(built)
    }
}
