use serde::{Deserialize, Serialize};

use crate::error::{CasalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
}

/// Architecture hyperparameters of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_ctx: usize,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Six-layer, 64-wide dense model used by the default experiment.
    pub fn toy(vocab_size: usize, n_ctx: usize) -> Self {
        Self {
            n_layer: 6,
            d_model: 64,
            d_attn: 64,
            n_heads: 4,
            d_ff: 128,
            n_ctx,
            vocab_size,
            moe: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_ctx", self.n_ctx),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CasalError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_layer < 3 {
            return Err(CasalError::InvalidConfig(format!(
                "n_layer must be at least 3 so an interior target layer exists, got {}",
                self.n_layer
            )));
        }
        if self.d_attn % self.n_heads != 0 {
            return Err(CasalError::InvalidConfig(format!(
                "d_attn ({}) must be divisible by n_heads ({})",
                self.d_attn, self.n_heads
            )));
        }
        if let Some(moe) = self.moe {
            if moe.n_experts == 0 || moe.top_k == 0 {
                return Err(CasalError::InvalidConfig("MoE counts must be positive".into()));
            }
            if moe.top_k > moe.n_experts {
                return Err(CasalError::InvalidConfig(format!(
                    "top_k ({}) exceeds n_experts ({})",
                    moe.top_k, moe.n_experts
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_attn / self.n_heads
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CasalError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy(32, 8);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(32, 8);
        c.n_layer = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(32, 8);
        c.moe = Some(MoeConfig { n_experts: 2, top_k: 3 });
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(32, 8);
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ModelConfig::toy(100, 8);
        c.moe = Some(MoeConfig { n_experts: 4, top_k: 2 });
        let back = ModelConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }
}
