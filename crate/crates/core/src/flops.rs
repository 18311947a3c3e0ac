//! Closed-form parameter and per-token compute counts for full fine-tuning,
//! LoRA and single-submodule training. Counts are exact `u128` integers;
//! only the ratios are floating point.

use serde::{Deserialize, Serialize};

use crate::error::{CasalError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_layer: u64,
    pub d_model: u64,
    pub d_attn: u64,
    pub d_ff: u64,
    #[serde(default = "one")]
    pub n_ctx: u64,
    #[serde(default = "one")]
    pub n_heads: u64,
    #[serde(default)]
    pub vocab_size: u64,
    #[serde(default)]
    pub lora_rank: Option<u64>,
}

fn one() -> u64 {
    1
}

impl ArchSpec {
    /// Llama-3.1-8B dimensions.
    pub fn llama_8b() -> Self {
        Self {
            n_layer: 32,
            d_model: 4096,
            d_attn: 4096,
            d_ff: 14336,
            n_ctx: 8192,
            n_heads: 32,
            vocab_size: 128_256,
            lora_rank: Some(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn),
            ("d_ff", self.d_ff),
            ("n_ctx", self.n_ctx),
            ("n_heads", self.n_heads),
        ] {
            if v == 0 {
                return Err(CasalError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.lora_rank == Some(0) {
            return Err(CasalError::InvalidConfig("lora_rank must be at least 1".into()));
        }
        Ok(())
    }

    fn rank(&self) -> Result<u128> {
        self.lora_rank
            .map(u128::from)
            .ok_or_else(|| CasalError::InvalidConfig("LoRA counts need lora_rank".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Casal,
    Lora,
}

/// What to include on top of the non-embedding, context-free count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardTerms {
    /// `2·n_layer·n_ctx·d_attn` attention-score term.
    pub context: bool,
    /// Unembedding matmul, `2·vocab·d_model`.
    pub embeddings: bool,
}

/// Non-embedding parameters `N = 2·d_model·n_layer·(2·d_attn + d_ff)`.
pub fn base_params(s: &ArchSpec) -> u128 {
    2 * s.d_model as u128 * s.n_layer as u128 * (2 * s.d_attn as u128 + s.d_ff as u128)
}

/// Embedding plus unembedding parameters.
pub fn embedding_params(s: &ArchSpec) -> u128 {
    2 * s.vocab_size as u128 * s.d_model as u128
}

pub fn forward_flops_per_token(s: &ArchSpec, terms: ForwardTerms) -> u128 {
    let mut c = 2 * base_params(s);
    if terms.context {
        c += 2 * s.n_layer as u128 * s.n_ctx as u128 * s.d_attn as u128;
    }
    if terms.embeddings {
        c += 2 * s.vocab_size as u128 * s.d_model as u128;
    }
    c
}

/// Trainable parameters of one feed-forward projection, `d_model·d_ff`.
pub fn casal_params(s: &ArchSpec) -> u128 {
    s.d_model as u128 * s.d_ff as u128
}

/// LoRA adapter parameters, summed over the per-matrix entries: QKV
/// `3r(d_attn + d_model)`, output `r(d_attn + d_model)` and two
/// feed-forward matrices `2r(d_model + d_ff)`, per layer.
pub fn lora_params(s: &ArchSpec) -> Result<u128> {
    let r = s.rank()?;
    let (dm, da, df) = (s.d_model as u128, s.d_attn as u128, s.d_ff as u128);
    Ok(s.n_layer as u128 * r * (4 * (da + dm) + 2 * (dm + df)))
}

/// Adapter forward cost, two FLOPs per adapter parameter.
pub fn lora_forward_flops(s: &ArchSpec) -> Result<u128> {
    Ok(2 * lora_params(s)?)
}

/// Training FLOPs per token (forward plus backward), context-free.
pub fn train_flops_per_token(s: &ArchSpec, method: Method) -> Result<u128> {
    Ok(match method {
        Method::Full => 6 * base_params(s),
        Method::Casal => 6 * casal_params(s),
        Method::Lora => forward_flops_per_token(s, ForwardTerms::default()) + 3 * lora_forward_flops(s)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub casal_param_fraction: f64,
    /// `3r / (2·d_model)`, assuming `d_attn = d_model` and `d_ff = 4·d_model`.
    pub lora_param_fraction_simplified: f64,
    /// Adapter parameters over `N` for the actual dimensions.
    pub lora_param_fraction_exact: f64,
    pub full_over_lora: f64,
    pub casal_vs_lora_speedup: f64,
}

pub fn ratios(s: &ArchSpec) -> Result<Ratios> {
    s.validate()?;
    let n = base_params(s) as f64;
    let base_fwd = forward_flops_per_token(s, ForwardTerms::default()) as f64;
    let lora_fwd = lora_forward_flops(s)? as f64;
    let r = s.rank()? as f64;
    Ok(Ratios {
        casal_param_fraction: s.d_ff as f64 / (2.0 * s.n_layer as f64 * (2.0 * s.d_attn as f64 + s.d_ff as f64)),
        lora_param_fraction_simplified: 3.0 * r / (2.0 * s.d_model as f64),
        lora_param_fraction_exact: lora_params(s)? as f64 / n,
        full_over_lora: 3.0 * base_fwd / (base_fwd + 3.0 * lora_fwd),
        casal_vs_lora_speedup: train_flops_per_token(s, Method::Lora)? as f64
            / train_flops_per_token(s, Method::Casal)? as f64,
    })
}

/// Every count and ratio for one spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub spec: ArchSpec,
    pub base_params: u128,
    pub casal_params: u128,
    pub lora_params: Option<u128>,
    pub forward_flops: u128,
    pub train_full: u128,
    pub train_casal: u128,
    pub train_lora: Option<u128>,
    pub ratios: Option<Ratios>,
}

pub fn report(s: &ArchSpec, terms: ForwardTerms) -> Result<FlopsReport> {
    s.validate()?;
    let lora = s.lora_rank.is_some();
    Ok(FlopsReport {
        spec: s.clone(),
        base_params: base_params(s),
        casal_params: casal_params(s),
        lora_params: if lora { Some(lora_params(s)?) } else { None },
        forward_flops: forward_flops_per_token(s, terms),
        train_full: train_flops_per_token(s, Method::Full)?,
        train_casal: train_flops_per_token(s, Method::Casal)?,
        train_lora: if lora { Some(train_flops_per_token(s, Method::Lora)?) } else { None },
        ratios: if lora { Some(ratios(s)?) } else { None },
    })
}

impl FlopsReport {
    /// `quantity,value` lines.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("base_params", self.base_params.to_string()),
            ("casal_params", self.casal_params.to_string()),
            ("forward_flops", self.forward_flops.to_string()),
            ("train_full", self.train_full.to_string()),
            ("train_casal", self.train_casal.to_string()),
        ];
        if let (Some(p), Some(t)) = (self.lora_params, self.train_lora) {
            rows.push(("lora_params", p.to_string()));
            rows.push(("train_lora", t.to_string()));
        }
        if let Some(r) = self.ratios {
            rows.push(("casal_param_fraction", format!("{:.6}", r.casal_param_fraction)));
            rows.push(("lora_param_fraction_simplified", format!("{:.6}", r.lora_param_fraction_simplified)));
            rows.push(("lora_param_fraction_exact", format!("{:.6}", r.lora_param_fraction_exact)));
            rows.push(("full_over_lora", format!("{:.4}", r.full_over_lora)));
            rows.push(("casal_vs_lora_speedup", format!("{:.2}", r.casal_vs_lora_speedup)));
        }
        let mut s = String::from("quantity,value\n");
        for (k, v) in rows {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}
