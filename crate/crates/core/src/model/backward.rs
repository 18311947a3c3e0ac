//! Reverse-mode gradients of next-token cross-entropy through the full
//! decoder, including attention, RMS norms and (frozen-selection) MoE routing.

use super::config::ModelConfig;
use super::forward::{run_batch, BatchOptions, FfnCache, ForwardCache, RmsCache};
use super::moe::{silu, silu_grad, FfnTrace};
use super::weights::{DenseFfn, FeedForward, TransformerWeights};
use crate::error::{CasalError, Result};
use crate::tensor::Matrix;

/// A training sequence; positions `p >= loss_start` predict `tokens[p + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmExample {
    pub tokens: Vec<u32>,
    pub loss_start: usize,
}

impl TransformerWeights {
    /// Same structure with every entry zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }
}

fn prediction_rows(examples: &[LmExample]) -> Result<(Vec<usize>, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for ex in examples {
        if ex.tokens.len() < 2 || ex.loss_start + 1 >= ex.tokens.len() {
            return Err(CasalError::InvalidInput(
                "training example has no prediction positions".into(),
            ));
        }
        for p in ex.loss_start..ex.tokens.len() - 1 {
            rows.push(offset + p);
            targets.push(ex.tokens[p + 1]);
        }
        offset += ex.tokens.len();
    }
    Ok((rows, targets))
}

/// Mean next-token cross-entropy over all prediction positions.
pub fn lm_loss(weights: &TransformerWeights, config: &ModelConfig, examples: &[LmExample]) -> Result<f64> {
    let (rows, targets) = prediction_rows(examples)?;
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let run = run_batch(
        weights,
        config,
        &seqs,
        BatchOptions {
            taps: &[],
            steer: None,
            keep_cache: false,
            logit_rows: Some(&rows),
        },
    )?;
    let (loss, _) = cross_entropy(&run.logits, &targets);
    Ok(loss)
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, targets: &[u32]) -> (f64, Matrix) {
    let n = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[t as usize];
        let g = grad.row_mut(r);
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / n;
        }
        g[t as usize] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn rms_backward(dy: &Matrix, cache: &RmsCache, gain: &Matrix, dgain: &mut Matrix) -> Matrix {
    let d = dy.cols();
    let g = gain.row(0);
    let mut dx = Matrix::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let dg = dgain.row_mut(0);
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
        }
        let mut proj = 0.0;
        for i in 0..d {
            proj += dyr[i] * g[i] * xh[i];
        }
        proj /= d as f64;
        let inv = cache.inv_rms[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dyr[i] * g[i] - xh[i] * proj);
        }
    }
    dx
}

/// Gradients of a gated FFN given upstream `d_out`; accumulates into `grad`
/// and returns the gradient with respect to the FFN input.
pub(crate) fn ffn_backward(
    x: &Matrix,
    f: &DenseFfn,
    trace: &FfnTrace,
    d_out: &Matrix,
    grad: &mut DenseFfn,
) -> Matrix {
    grad.w_down.add_t_matmul(&trace.inter, d_out);
    let d_inter = d_out.matmul_t(&f.w_down);
    let mut d_gate = Matrix::zeros(d_inter.rows(), d_inter.cols());
    let mut d_up = Matrix::zeros(d_inter.rows(), d_inter.cols());
    for (((dg, du), (&di, &g)), &u) in d_gate
        .as_mut_slice()
        .iter_mut()
        .zip(d_up.as_mut_slice().iter_mut())
        .zip(d_inter.as_slice().iter().zip(trace.gate_pre.as_slice()))
        .zip(trace.up.as_slice())
    {
        *du = di * silu(g);
        *dg = di * u * silu_grad(g);
    }
    grad.w_gate.add_t_matmul(x, &d_gate);
    grad.w_up.add_t_matmul(x, &d_up);
    let mut dx = d_gate.matmul_t(&f.w_gate);
    dx.add_assign(&d_up.matmul_t(&f.w_up));
    dx
}

/// Loss and full-model gradient for a batch of examples.
pub fn lm_loss_and_grad(
    weights: &TransformerWeights,
    config: &ModelConfig,
    examples: &[LmExample],
) -> Result<(f64, TransformerWeights)> {
    let (rows, targets) = prediction_rows(examples)?;
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let run = run_batch(
        weights,
        config,
        &seqs,
        BatchOptions {
            taps: &[],
            steer: None,
            keep_cache: true,
            logit_rows: Some(&rows),
        },
    )?;
    let (loss, dlogits) = cross_entropy(&run.logits, &targets);
    let cache = run.cache.expect("cache requested");
    let grad = backward(weights, config, &cache, &rows, &dlogits)?;
    Ok((loss, grad))
}

fn backward(
    weights: &TransformerWeights,
    config: &ModelConfig,
    cache: &ForwardCache,
    logit_rows: &[usize],
    dlogits: &Matrix,
) -> Result<TransformerWeights> {
    let mut grad = weights.zeros_like();
    let n = cache.tokens.len();
    let d = config.d_model;

    grad.unembed.add_t_matmul(&cache.xnf, dlogits);
    let dxnf = dlogits.matmul_t(&weights.unembed);
    let dfinal = rms_backward(&dxnf, &cache.final_norm, &weights.final_norm, &mut grad.final_norm);
    let mut dx = Matrix::zeros(n, d);
    for (i, &r) in logit_rows.iter().enumerate() {
        dx.row_mut(r).copy_from_slice(dfinal.row(i));
    }

    for l in (0..config.n_layer).rev() {
        let lw = &weights.layers[l];
        let lc = &cache.layers[l];
        let lg = &mut grad.layers[l];

        // feed-forward
        let dxn2 = match (&lw.ffn, &lc.ffn, &mut lg.ffn) {
            (FeedForward::Dense(f), FfnCache::Dense(trace), FeedForward::Dense(gf)) => {
                ffn_backward(&lc.xn2, f, trace, &dx, gf)
            }
            (
                FeedForward::Moe { router, experts },
                FfnCache::Moe { routing, experts: traces },
                FeedForward::Moe {
                    router: grouter,
                    experts: gexperts,
                },
            ) => {
                let mut dxn2 = Matrix::zeros(n, d);
                // d loss / d (renormalized weight) per token and slot
                let mut dw: Vec<Vec<f64>> = routing.selected.iter().map(|s| vec![0.0; s.len()]).collect();
                for (e, (assigned, trace)) in traces.iter().enumerate() {
                    if assigned.is_empty() {
                        continue;
                    }
                    let tokens: Vec<usize> = assigned.iter().map(|&(t, _)| t).collect();
                    let mut dy = Matrix::zeros(tokens.len(), d);
                    for (i, &(t, slot)) in assigned.iter().enumerate() {
                        let w = routing.weights[t][slot];
                        let up = dx.row(t);
                        dw[t][slot] = up.iter().zip(trace.out.row(i)).map(|(a, b)| a * b).sum();
                        for (o, u) in dy.row_mut(i).iter_mut().zip(up) {
                            *o = w * u;
                        }
                    }
                    let xe = lc.xn2.select_rows(&tokens);
                    let dxe = ffn_backward(&xe, &experts[e], trace, &dy, &mut gexperts[e]);
                    for (i, &t) in tokens.iter().enumerate() {
                        for (o, v) in dxn2.row_mut(t).iter_mut().zip(dxe.row(i)) {
                            *o += v;
                        }
                    }
                }
                // through renormalization and softmax to router logits
                let n_exp = router.cols();
                let mut dlogits_r = Matrix::zeros(n, n_exp);
                for t in 0..n {
                    let sel = &routing.selected[t];
                    let p = &routing.probs[t];
                    let total: f64 = sel.iter().map(|&e| p[e]).sum();
                    let wsum: f64 = sel
                        .iter()
                        .zip(&routing.weights[t])
                        .zip(&dw[t])
                        .map(|((_, w), g)| w * g)
                        .sum();
                    let mut dp = vec![0.0; n_exp];
                    for (slot, &e) in sel.iter().enumerate() {
                        dp[e] = (dw[t][slot] - wsum) / total;
                    }
                    let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    for (e, o) in dlogits_r.row_mut(t).iter_mut().enumerate() {
                        *o = p[e] * (dp[e] - dot);
                    }
                }
                grouter.add_t_matmul(&lc.xn2, &dlogits_r);
                dxn2.add_assign(&dlogits_r.matmul_t(router));
                dxn2
            }
            _ => {
                return Err(CasalError::InvalidConfig(format!(
                    "layer {l} feed-forward kind mismatch"
                )))
            }
        };
        let dmid = rms_backward(&dxn2, &lc.norm2, &lw.ffn_norm, &mut lg.ffn_norm);
        dx.add_assign(&dmid);

        // attention
        lg.wo.add_t_matmul(&lc.attn.heads, &dx);
        let dheads = dx.matmul_t(&lw.wo);
        let (dq, dk, dv) = attention_backward(config, cache, &lc.attn, &dheads);
        lg.wq.add_t_matmul(&lc.xn1, &dq);
        lg.wk.add_t_matmul(&lc.xn1, &dk);
        lg.wv.add_t_matmul(&lc.xn1, &dv);
        let mut dxn1 = dq.matmul_t(&lw.wq);
        dxn1.add_assign(&dk.matmul_t(&lw.wk));
        dxn1.add_assign(&dv.matmul_t(&lw.wv));
        let dres = rms_backward(&dxn1, &lc.norm1, &lw.attn_norm, &mut lg.attn_norm);
        dx.add_assign(&dres);
    }

    for (r, (&tok, &pos)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
        let src = dx.row(r);
        for (o, v) in grad.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
            *o += v;
        }
        for (o, v) in grad.pos_emb.row_mut(pos).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok(grad)
}

fn attention_backward(
    config: &ModelConfig,
    cache: &ForwardCache,
    attn: &super::forward::AttnCache,
    dheads: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let n = dheads.rows();
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(n, config.d_attn);
    let mut dk = Matrix::zeros(n, config.d_attn);
    let mut dv = Matrix::zeros(n, config.d_attn);
    let offsets = &cache.offsets;
    for s in 0..offsets.len() - 1 {
        let start = offsets[s];
        let t = offsets[s + 1] - start;
        for h in 0..config.n_heads {
            let c0 = h * hd;
            let p = &attn.probs[s * config.n_heads + h];
            for i in 0..t {
                let dout = &dheads.row(start + i)[c0..c0 + hd];
                // dP_ij = dout_i · v_j, then softmax backward
                let mut dp = vec![0.0; i + 1];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vj = &attn.v.row(start + j)[c0..c0 + hd];
                    *dpj = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
                let dot: f64 = (0..=i).map(|j| dp[j] * p.get(i, j)).sum();
                for j in 0..=i {
                    let pij = p.get(i, j);
                    // value gradient
                    {
                        let dvj = &mut dv.row_mut(start + j)[c0..c0 + hd];
                        for (o, a) in dvj.iter_mut().zip(dout) {
                            *o += pij * a;
                        }
                    }
                    let ds = pij * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f64> = attn.k.row(start + j)[c0..c0 + hd].to_vec();
                    let qi: Vec<f64> = attn.q.row(start + i)[c0..c0 + hd].to_vec();
                    for (o, kv) in dq.row_mut(start + i)[c0..c0 + hd].iter_mut().zip(&kj) {
                        *o += ds * kv;
                    }
                    for (o, qv) in dk.row_mut(start + j)[c0..c0 + hd].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
