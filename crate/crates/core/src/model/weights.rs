use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{shape_err, CasalError, Result};
use crate::tensor::Matrix;

/// Gated feed-forward triple: `down(silu(x·gate) ⊙ (x·up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfn {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(DenseFfn),
    Moe {
        /// `d_model × n_experts` gate projection producing expert logits.
        router: Matrix,
        experts: Vec<DenseFfn>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub ffn: FeedForward,
}

/// All learnable tensors of the toy decoder. Norm gains are `1 × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub unembed: Matrix,
}

/// Standard deviations used by [`TransformerWeights::init`].
#[derive(Debug, Clone, Copy)]
pub struct InitScales {
    pub tok_emb: f64,
    pub pos_emb: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            tok_emb: 0.02,
            pos_emb: 0.1,
        }
    }
}

impl DenseFfn {
    fn init(d_model: usize, d_ff: usize, n_layer: usize, rng: &mut ChaCha8Rng) -> Self {
        let depth = (2.0 * n_layer as f64).sqrt();
        Self {
            w_gate: Matrix::randn(d_model, d_ff, 1.0 / (d_model as f64).sqrt(), rng),
            w_up: Matrix::randn(d_model, d_ff, 1.0 / (d_model as f64).sqrt(), rng),
            w_down: Matrix::randn(d_ff, d_model, 1.0 / (d_ff as f64).sqrt() / depth, rng),
        }
    }

    pub(crate) fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            w_gate: Matrix::zeros(d_model, d_ff),
            w_up: Matrix::zeros(d_model, d_ff),
            w_down: Matrix::zeros(d_ff, d_model),
        }
    }
}

impl TransformerWeights {
    /// Random initialization seeded by `config.rng_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        Self::init_with(config, InitScales::default())
    }

    pub fn init_with(config: &ModelConfig, scales: InitScales) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.d_model;
        let a = config.d_attn;
        let depth = (2.0 * config.n_layer as f64).sqrt();
        let tok_emb = Matrix::randn(config.vocab_size, d, scales.tok_emb, &mut rng);
        let pos_emb = Matrix::randn(config.n_ctx, d, scales.pos_emb, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            let wq = Matrix::randn(d, a, 1.0 / (d as f64).sqrt(), &mut rng);
            let wk = Matrix::randn(d, a, 1.0 / (d as f64).sqrt(), &mut rng);
            let wv = Matrix::randn(d, a, 1.0 / (d as f64).sqrt(), &mut rng);
            let wo = Matrix::randn(a, d, 1.0 / (a as f64).sqrt() / depth, &mut rng);
            let ffn = match config.moe {
                None => FeedForward::Dense(DenseFfn::init(d, config.d_ff, config.n_layer, &mut rng)),
                Some(moe) => FeedForward::Moe {
                    router: Matrix::randn(d, moe.n_experts, 1.0 / (d as f64).sqrt(), &mut rng),
                    experts: (0..moe.n_experts)
                        .map(|_| DenseFfn::init(d, config.d_ff, config.n_layer, &mut rng))
                        .collect(),
                },
            };
            layers.push(LayerWeights {
                attn_norm: Matrix::filled(1, d, 1.0),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: Matrix::filled(1, d, 1.0),
                ffn,
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Matrix::filled(1, d, 1.0),
            unembed: Matrix::randn(d, config.vocab_size, 1.0 / (d as f64).sqrt(), &mut rng),
        })
    }

    /// Every tensor zero, including norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let a = config.d_attn;
        let layers = (0..config.n_layer)
            .map(|_| LayerWeights {
                attn_norm: Matrix::zeros(1, d),
                wq: Matrix::zeros(d, a),
                wk: Matrix::zeros(d, a),
                wv: Matrix::zeros(d, a),
                wo: Matrix::zeros(a, d),
                ffn_norm: Matrix::zeros(1, d),
                ffn: match config.moe {
                    None => FeedForward::Dense(DenseFfn::zeros(d, config.d_ff)),
                    Some(moe) => FeedForward::Moe {
                        router: Matrix::zeros(d, moe.n_experts),
                        experts: (0..moe.n_experts).map(|_| DenseFfn::zeros(d, config.d_ff)).collect(),
                    },
                },
            })
            .collect();
        Ok(Self {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.n_ctx, d),
            layers,
            final_norm: Matrix::zeros(1, d),
            unembed: Matrix::zeros(d, config.vocab_size),
        })
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.ffn_norm"), &layer.ffn_norm));
            match &layer.ffn {
                FeedForward::Dense(f) => {
                    out.push((format!("layers.{l}.w_gate"), &f.w_gate));
                    out.push((format!("layers.{l}.w_up"), &f.w_up));
                    out.push((format!("layers.{l}.w_down"), &f.w_down));
                }
                FeedForward::Moe { router, experts } => {
                    out.push((format!("layers.{l}.router"), router));
                    for (e, f) in experts.iter().enumerate() {
                        out.push((format!("layers.{l}.experts.{e}.w_gate"), &f.w_gate));
                        out.push((format!("layers.{l}.experts.{e}.w_up"), &f.w_up));
                        out.push((format!("layers.{l}.experts.{e}.w_down"), &f.w_down));
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable view in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ffn_norm);
            match &mut layer.ffn {
                FeedForward::Dense(f) => {
                    out.push(&mut f.w_gate);
                    out.push(&mut f.w_up);
                    out.push(&mut f.w_down);
                }
                FeedForward::Moe { router, experts } => {
                    out.push(router);
                    for f in experts {
                        out.push(&mut f.w_gate);
                        out.push(&mut f.w_up);
                        out.push(&mut f.w_down);
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Checks every tensor against `config` and that all entries are finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_model;
        let a = config.d_attn;
        let check = |name: &str, m: &Matrix, r: usize, c: usize| -> Result<()> {
            if m.shape() != [r, c] {
                return Err(shape_err(name, &[r, c], &m.shape()));
            }
            if !m.all_finite() {
                return Err(CasalError::NonFinite(name.to_string()));
            }
            Ok(())
        };
        check("tok_emb", &self.tok_emb, config.vocab_size, d)?;
        check("pos_emb", &self.pos_emb, config.n_ctx, d)?;
        if self.layers.len() != config.n_layer {
            return Err(shape_err("layers", &[config.n_layer], &[self.layers.len()]));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            check(&format!("layers.{l}.attn_norm"), &layer.attn_norm, 1, d)?;
            check(&format!("layers.{l}.wq"), &layer.wq, d, a)?;
            check(&format!("layers.{l}.wk"), &layer.wk, d, a)?;
            check(&format!("layers.{l}.wv"), &layer.wv, d, a)?;
            check(&format!("layers.{l}.wo"), &layer.wo, a, d)?;
            check(&format!("layers.{l}.ffn_norm"), &layer.ffn_norm, 1, d)?;
            let check_ffn = |prefix: &str, f: &DenseFfn| -> Result<()> {
                check(&format!("{prefix}.w_gate"), &f.w_gate, d, config.d_ff)?;
                check(&format!("{prefix}.w_up"), &f.w_up, d, config.d_ff)?;
                check(&format!("{prefix}.w_down"), &f.w_down, config.d_ff, d)
            };
            match (&layer.ffn, config.moe) {
                (FeedForward::Dense(f), None) => check_ffn(&format!("layers.{l}"), f)?,
                (FeedForward::Moe { router, experts }, Some(moe)) => {
                    check(&format!("layers.{l}.router"), router, d, moe.n_experts)?;
                    if experts.len() != moe.n_experts {
                        return Err(shape_err(
                            format!("layers.{l}.experts"),
                            &[moe.n_experts],
                            &[experts.len()],
                        ));
                    }
                    for (e, f) in experts.iter().enumerate() {
                        check_ffn(&format!("layers.{l}.experts.{e}"), f)?;
                    }
                }
                _ => {
                    return Err(CasalError::InvalidConfig(format!(
                        "layer {l} feed-forward kind does not match config"
                    )))
                }
            }
        }
        check("final_norm", &self.final_norm, 1, d)?;
        check("unembed", &self.unembed, d, config.vocab_size)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::MoeConfig;

    #[test]
    fn init_is_seeded_and_valid() {
        let cfg = ModelConfig::toy(40, 8);
        let a = TransformerWeights::init(&cfg).unwrap();
        let b = TransformerWeights::init(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate(&cfg).unwrap();
        let mut other = cfg.clone();
        other.rng_seed = 1;
        assert_ne!(a, TransformerWeights::init(&other).unwrap());
    }

    #[test]
    fn named_and_mut_views_agree() {
        let mut cfg = ModelConfig::toy(40, 8);
        cfg.moe = Some(MoeConfig { n_experts: 3, top_k: 2 });
        let mut w = TransformerWeights::init(&cfg).unwrap();
        let shapes: Vec<_> = w.named_tensors().iter().map(|(_, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = w.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
        w.validate(&cfg).unwrap();
    }

    #[test]
    fn validate_catches_shape_and_nan() {
        let cfg = ModelConfig::toy(40, 8);
        let mut w = TransformerWeights::init(&cfg).unwrap();
        w.unembed = Matrix::zeros(64, 39);
        assert!(matches!(w.validate(&cfg), Err(CasalError::ShapeMismatch { .. })));
        let mut w = TransformerWeights::init(&cfg).unwrap();
        w.layers[1].wq.set(0, 0, f64::NAN);
        assert!(matches!(w.validate(&cfg), Err(CasalError::NonFinite(_))));
    }
}
