//! Weight checkpoints: the config as TOML header, then every tensor by name.

use std::path::Path;

use super::config::ModelConfig;
use super::weights::TransformerWeights;
use crate::container::{sha256_hex, Container};
use crate::error::{shape_err, CasalError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASALWT1";

pub fn checkpoint_bytes(weights: &TransformerWeights, config: &ModelConfig) -> Vec<u8> {
    Container {
        magic: *CHECKPOINT_MAGIC,
        header: config.to_toml(),
        tensors: weights
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect(),
    }
    .to_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, TransformerWeights)> {
    let c = Container::from_bytes(bytes, CHECKPOINT_MAGIC)?;
    let config = ModelConfig::from_toml(&c.header)?;
    let mut weights = TransformerWeights::zeros(&config)?;
    let names: Vec<String> = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != c.tensors.len() {
        return Err(shape_err("checkpoint tensor count", &[names.len()], &[c.tensors.len()]));
    }
    for ((slot, name), (got_name, m)) in weights.tensors_mut().into_iter().zip(&names).zip(c.tensors) {
        if &got_name != name {
            return Err(CasalError::Format(format!("expected tensor {name}, found {got_name}")));
        }
        if slot.shape() != m.shape() {
            return Err(shape_err(name.clone(), &slot.shape(), &m.shape()));
        }
        *slot = m;
    }
    weights.validate(&config)?;
    Ok((config, weights))
}

pub fn save_checkpoint(path: &Path, weights: &TransformerWeights, config: &ModelConfig) -> Result<String> {
    let bytes = checkpoint_bytes(weights, config);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TransformerWeights)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// SHA-256 of the checkpoint encoding; identifies a set of weights.
pub fn weights_digest(weights: &TransformerWeights, config: &ModelConfig) -> String {
    sha256_hex(&checkpoint_bytes(weights, config))
}
