//! MMCK checkpoints:
//!
//! ```text
//! "MMCK" | version u32 | json_len u32 | config json
//! parameters (canonical order) | buffers, all f64 little-endian
//! ```

use std::path::Path;

use tcrbind_autograd::Tensor;

use super::params::ModelParams;
use super::{Model, ModelBuffers, ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let json = model.config.to_json();
    let n_values =
        model.params.numel() + model.buffers.parts().iter().map(|b| b.len()).sum::<usize>();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let values = model
        .params
        .leaves()
        .into_iter()
        .flat_map(|t| t.data().iter())
        .chain(model.buffers.parts().into_iter().flatten());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing MMCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + json_len)
        .ok_or_else(|| bad("truncated config"))?;
    let json = std::str::from_utf8(json).map_err(|e| bad(e.to_string()))?;
    let config = ModelConfig::from_json(json)?;

    let body = &bytes[12 + json_len..];
    if !body.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let spec = ModelParams::spec(&config);
    let mut short = false;
    let mut take = |n: usize| -> Vec<f64> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        short |= v.len() != n;
        v
    };
    let leaves: Vec<Vec<f64>> = spec.leaves().iter().map(|s| take(s.numel())).collect();
    let template = ModelBuffers::new(&config);
    let running_mean = take(template.running_mean.len());
    let running_var = take(template.running_var.len());
    let pcf_mean = take(template.pcf_mean.len());
    let pcf_scale = take(template.pcf_scale.len());
    if short {
        return Err(bad("truncated payload"));
    }
    if values.next().is_some() {
        return Err(bad("trailing data after buffers"));
    }
    let mut leaves = leaves.into_iter();
    let params = spec.map(|s| {
        Tensor::new(&s.shape, leaves.next().expect("one per leaf")).expect("sized by spec")
    });
    Ok(Model {
        config,
        params,
        buffers: ModelBuffers {
            running_mean,
            running_var,
            pcf_mean,
            pcf_scale,
        },
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Model, ModelError> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(ModelError::ConfigMismatch(describe_difference(
            expected,
            &model.config,
        )));
    }
    Ok(model)
}

fn describe_difference(expected: &ModelConfig, found: &ModelConfig) -> String {
    let (a, b) = (
        serde_json::to_value(expected).expect("serializable"),
        serde_json::to_value(found).expect("serializable"),
    );
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!(
                    "{k}: expected {va}, found {}",
                    b.get(k).unwrap_or(&serde_json::Value::Null)
                ));
            }
        }
    }
    diffs.join("; ")
}
