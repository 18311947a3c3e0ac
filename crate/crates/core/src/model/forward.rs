//! Pre-norm decoder forward pass with residual-stream taps and steering.
//!
//! Layer `l` reads the residual `a^{l-1}` (`PreLayer`), adds causal
//! multi-head attention, then the feed-forward block, and leaves `a^{l}`
//! (`PostLayer`). `FfIntermediate` is the dense input to `w_down`.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::moe::{ffn_trace, route, FfnTrace, Routing};
use super::weights::{FeedForward, LayerWeights, TransformerWeights};
use crate::error::{shape_err, CasalError, Result};
use crate::tensor::{softmax_in_place, Matrix};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    LastToken,
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamPoint {
    /// Residual entering the layer, `a^{l-1}`.
    PreLayer,
    /// Residual leaving the layer, `a^{l}`.
    PostLayer,
    /// Residual after the attention sublayer, entering the feed-forward block.
    PostAttention,
    /// Gated feed-forward activations feeding `w_down` (dense layers only).
    FfIntermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationTap {
    pub layer_index: usize,
    pub position_policy: PositionPolicy,
    pub stream_point: StreamPoint,
}

impl ActivationTap {
    pub fn last(layer_index: usize, stream_point: StreamPoint) -> Self {
        Self {
            layer_index,
            position_policy: PositionPolicy::LastToken,
            stream_point,
        }
    }
}

/// Vector added to the post-layer residual of `layer` at the given positions.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSteer<'a> {
    pub layer: usize,
    pub vector: &'a [f64],
    pub positions: PositionPolicy,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq_len × vocab_size`
    pub logits: Matrix,
    pub activations: Vec<(ActivationTap, Matrix)>,
}

impl ForwardOutput {
    pub fn activation(&self, tap: &ActivationTap) -> Option<&Matrix> {
        self.activations.iter().find(|(t, _)| t == tap).map(|(_, m)| m)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RmsCache {
    pub xhat: Matrix,
    pub inv_rms: Vec<f64>,
}

pub(crate) fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, RmsCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_rms = Vec::with_capacity(x.rows());
    let g = gain.row(0);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms.push(inv);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = v * inv;
        }
        let xh = xhat.row(r).to_vec();
        for ((o, h), gi) in out.row_mut(r).iter_mut().zip(&xh).zip(g) {
            *o = h * gi;
        }
    }
    (out, RmsCache { xhat, inv_rms })
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities per (sequence, head), each `T × T`.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs, `N × d_attn`.
    pub heads: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) enum FfnCache {
    Dense(FfnTrace),
    Moe {
        routing: Routing,
        /// Per expert: routed token rows and the expert's trace on them.
        experts: Vec<(Vec<(usize, usize)>, FfnTrace)>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub norm1: RmsCache,
    pub xn1: Matrix,
    pub attn: AttnCache,
    pub norm2: RmsCache,
    pub xn2: Matrix,
    pub ffn: FfnCache,
}

/// Everything needed to backpropagate through one batched forward.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub offsets: Vec<usize>,
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub final_norm: RmsCache,
    pub xnf: Matrix,
}

/// Result of the batched engine over stacked sequences.
pub(crate) struct BatchRun {
    /// Logits for the rows requested in `logit_rows`, in that order.
    pub logits: Matrix,
    /// Captured activations per tap on all stacked rows.
    pub captures: Vec<Matrix>,
    pub cache: Option<ForwardCache>,
}

pub(crate) struct BatchOptions<'a> {
    pub taps: &'a [ActivationTap],
    pub steer: Option<ResidualSteer<'a>>,
    pub keep_cache: bool,
    /// Stacked row indices whose logits are computed; `None` means all rows.
    pub logit_rows: Option<&'a [usize]>,
}

pub(crate) fn check_inputs(weights: &TransformerWeights, config: &ModelConfig, seq: &[u32]) -> Result<()> {
    if seq.is_empty() {
        return Err(CasalError::InvalidInput("empty token sequence".into()));
    }
    if seq.len() > config.n_ctx {
        return Err(CasalError::ContextOverflow {
            len: seq.len(),
            n_ctx: config.n_ctx,
        });
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(CasalError::TokenOutOfRange {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    if weights.tok_emb.shape() != [config.vocab_size, config.d_model]
        || weights.unembed.shape() != [config.d_model, config.vocab_size]
        || weights.pos_emb.shape() != [config.n_ctx, config.d_model]
        || weights.layers.len() != config.n_layer
    {
        return Err(shape_err(
            "weights vs config",
            &[config.n_layer, config.vocab_size, config.d_model],
            &[weights.layers.len(), weights.tok_emb.rows(), weights.tok_emb.cols()],
        ));
    }
    Ok(())
}

fn attention(
    layer: &LayerWeights,
    config: &ModelConfig,
    xn: &Matrix,
    offsets: &[usize],
) -> AttnCache {
    let q = xn.matmul(&layer.wq);
    let k = xn.matmul(&layer.wk);
    let v = xn.matmul(&layer.wv);
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Matrix::zeros(xn.rows(), config.d_attn);
    let mut probs = Vec::with_capacity((offsets.len() - 1) * config.n_heads);
    for s in 0..offsets.len() - 1 {
        let (start, end) = (offsets[s], offsets[s + 1]);
        let t = end - start;
        for h in 0..config.n_heads {
            let c0 = h * hd;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(start + i)[c0..c0 + hd];
                let row = p.row_mut(i);
                for j in 0..=i {
                    let kj = &k.row(start + j)[c0..c0 + hd];
                    row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut row[..=i]);
            }
            for i in 0..t {
                let out = &mut heads.row_mut(start + i)[c0..c0 + hd];
                for j in 0..=i {
                    let w = p.get(i, j);
                    let vj = &v.row(start + j)[c0..c0 + hd];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    AttnCache { q, k, v, probs, heads }
}

fn ffn_block(
    ffn: &FeedForward,
    config: &ModelConfig,
    xn2: &Matrix,
) -> Result<(Matrix, FfnCache)> {
    match ffn {
        FeedForward::Dense(f) => {
            let trace = ffn_trace(xn2, f);
            Ok((trace.out.clone(), FfnCache::Dense(trace)))
        }
        FeedForward::Moe { router, experts } => {
            let top_k = config.moe.map(|m| m.top_k).ok_or_else(|| {
                CasalError::InvalidConfig("MoE weights with a dense config".into())
            })?;
            let routing = route(xn2, router, top_k)?;
            let mut out = Matrix::zeros(xn2.rows(), xn2.cols());
            let mut traces = Vec::with_capacity(experts.len());
            for (e, rows) in routing.assignments(experts.len()).into_iter().enumerate() {
                let tokens: Vec<usize> = rows.iter().map(|&(t, _)| t).collect();
                let trace = ffn_trace(&xn2.select_rows(&tokens), &experts[e]);
                for (i, &(t, slot)) in rows.iter().enumerate() {
                    let w = routing.weights[t][slot];
                    for (o, y) in out.row_mut(t).iter_mut().zip(trace.out.row(i)) {
                        *o += w * y;
                    }
                }
                traces.push((rows, trace));
            }
            Ok((
                out,
                FfnCache::Moe {
                    routing,
                    experts: traces,
                },
            ))
        }
    }
}

fn tap_rows(policy: PositionPolicy, offsets: &[usize]) -> Vec<usize> {
    match policy {
        PositionPolicy::AllTokens => (0..*offsets.last().unwrap()).collect(),
        PositionPolicy::LastToken => offsets[1..].iter().map(|&e| e - 1).collect(),
    }
}

/// Batched engine over several sequences stacked row-wise. Row-wise work is
/// independent of the batch composition, so results per sequence match a
/// single-sequence run bit for bit.
pub(crate) fn run_batch(
    weights: &TransformerWeights,
    config: &ModelConfig,
    seqs: &[&[u32]],
    opts: BatchOptions<'_>,
) -> Result<BatchRun> {
    for seq in seqs {
        check_inputs(weights, config, seq)?;
    }
    for tap in opts.taps {
        if tap.layer_index >= config.n_layer {
            return Err(CasalError::InvalidInput(format!(
                "tap layer {} out of range for {} layers",
                tap.layer_index, config.n_layer
            )));
        }
        if tap.stream_point == StreamPoint::FfIntermediate && config.moe.is_some() {
            return Err(CasalError::InvalidInput(
                "ff_intermediate tap is only defined for dense feed-forward layers".into(),
            ));
        }
    }
    if let Some(st) = &opts.steer {
        if st.layer >= config.n_layer || st.vector.len() != config.d_model {
            return Err(shape_err(
                "steering vector",
                &[config.d_model],
                &[st.vector.len()],
            ));
        }
    }

    let mut offsets = Vec::with_capacity(seqs.len() + 1);
    offsets.push(0);
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for seq in seqs {
        tokens.extend_from_slice(seq);
        positions.extend(0..seq.len());
        offsets.push(tokens.len());
    }
    let n = tokens.len();
    let d = config.d_model;

    let mut x = Matrix::zeros(n, d);
    for (r, (&tok, &pos)) in tokens.iter().zip(&positions).enumerate() {
        let row = x.row_mut(r);
        for ((o, e), p) in row
            .iter_mut()
            .zip(weights.tok_emb.row(tok as usize))
            .zip(weights.pos_emb.row(pos))
        {
            *o = e + p;
        }
    }

    let mut captures: Vec<Option<Matrix>> = vec![None; opts.taps.len()];
    let capture = |captures: &mut Vec<Option<Matrix>>, layer: usize, point: StreamPoint, m: &Matrix| {
        for (slot, tap) in captures.iter_mut().zip(opts.taps) {
            if tap.layer_index == layer && tap.stream_point == point {
                *slot = Some(m.select_rows(&tap_rows(tap.position_policy, &offsets)));
            }
        }
    };

    let mut layer_caches = Vec::with_capacity(if opts.keep_cache { config.n_layer } else { 0 });
    for (l, layer) in weights.layers.iter().enumerate() {
        capture(&mut captures, l, StreamPoint::PreLayer, &x);
        let (xn1, norm1) = rms_norm(&x, &layer.attn_norm);
        let attn = attention(layer, config, &xn1, &offsets);
        x.add_assign(&attn.heads.matmul(&layer.wo));
        capture(&mut captures, l, StreamPoint::PostAttention, &x);
        let (xn2, norm2) = rms_norm(&x, &layer.ffn_norm);
        let (ffn_out, ffn_cache) = ffn_block(&layer.ffn, config, &xn2)?;
        if let FfnCache::Dense(trace) = &ffn_cache {
            capture(&mut captures, l, StreamPoint::FfIntermediate, &trace.inter);
        }
        x.add_assign(&ffn_out);
        if let Some(st) = &opts.steer {
            if st.layer == l {
                for r in tap_rows(st.positions, &offsets) {
                    for (o, v) in x.row_mut(r).iter_mut().zip(st.vector) {
                        *o += v;
                    }
                }
            }
        }
        capture(&mut captures, l, StreamPoint::PostLayer, &x);
        if opts.keep_cache {
            layer_caches.push(LayerCache {
                norm1,
                xn1,
                attn,
                norm2,
                xn2,
                ffn: ffn_cache,
            });
        }
    }

    let final_in = match opts.logit_rows {
        Some(rows) => x.select_rows(rows),
        None => x,
    };
    let (xnf, final_norm) = rms_norm(&final_in, &weights.final_norm);
    let logits = xnf.matmul(&weights.unembed);

    let cache = opts.keep_cache.then(|| ForwardCache {
        offsets: offsets.clone(),
        tokens,
        positions,
        layers: layer_caches,
        final_norm,
        xnf,
    });
    Ok(BatchRun {
        logits,
        captures: captures
            .into_iter()
            .map(|c| c.expect("every validated tap is captured"))
            .collect(),
        cache,
    })
}

/// Deterministic forward over one token sequence.
pub fn forward(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[u32],
    taps: &[ActivationTap],
) -> Result<ForwardOutput> {
    forward_steered(weights, config, tokens, taps, None)
}

/// [`forward`] with an optional residual-stream addition.
pub fn forward_steered(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[u32],
    taps: &[ActivationTap],
    steer: Option<ResidualSteer<'_>>,
) -> Result<ForwardOutput> {
    let run = run_batch(
        weights,
        config,
        &[tokens],
        BatchOptions {
            taps,
            steer,
            keep_cache: false,
            logit_rows: None,
        },
    )?;
    Ok(ForwardOutput {
        logits: run.logits,
        activations: taps.iter().copied().zip(run.captures).collect(),
    })
}

/// Next-token logits at the final position.
pub fn next_token_logits(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[u32],
    steer: Option<ResidualSteer<'_>>,
) -> Result<Vec<f64>> {
    let last = [tokens.len().saturating_sub(1)];
    let run = run_batch(
        weights,
        config,
        &[tokens],
        BatchOptions {
            taps: &[],
            steer,
            keep_cache: false,
            logit_rows: Some(&last),
        },
    )?;
    Ok(run.logits.row(0).to_vec())
}

/// Selected experts per layer and token position (empty for dense layers).
pub fn expert_assignments(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[u32],
) -> Result<Vec<Vec<Vec<usize>>>> {
    let run = run_batch(
        weights,
        config,
        &[tokens],
        BatchOptions {
            taps: &[],
            steer: None,
            keep_cache: true,
            logit_rows: Some(&[]),
        },
    )?;
    let cache = run.cache.expect("cache requested");
    Ok(cache
        .layers
        .iter()
        .map(|lc| match &lc.ffn {
            FfnCache::Moe { routing, .. } => routing.selected.clone(),
            FfnCache::Dense(_) => Vec::new(),
        })
        .collect())
}
