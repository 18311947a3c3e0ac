//! Difference-of-means steering vectors, steered targets, inference-time
//! steering (CAA) and the layer-selection sweep.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{derive_seed, Container};
use crate::corpus::QueryRecord;
use crate::error::{CasalError, Result};
use crate::eval::{Behavior, EvalSet};
use crate::model::forward::{run_batch, BatchOptions};
use crate::model::{
    greedy_completions, sample_completion_steered, ActivationTap, ModelConfig, PositionPolicy,
    ResidualSteer, SamplingConfig, StreamPoint, TransformerWeights,
};
use crate::tensor::Matrix;

/// Queries per batched forward during extraction.
const EXTRACT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer_index: usize,
    pub stream_point: StreamPoint,
    pub position_policy: PositionPolicy,
    pub ids: Vec<String>,
    /// One `d_model` row per id.
    pub rows: Matrix,
}

impl ActivationMatrix {
    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Matrix> {
        let index: HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    CasalError::InvalidInput(format!("no activation row for id {id}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.rows.select_rows(&rows))
    }
}

/// Last-prompt-token activations at several taps in one pass per chunk.
/// `FfIntermediate` rows are `d_ff` wide; every other point is `d_model`.
/// Batched extraction equals single-query extraction bit for bit.
pub fn extract_many(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[&QueryRecord],
    taps: &[(usize, StreamPoint)],
) -> Result<Vec<ActivationMatrix>> {
    let taps: Vec<ActivationTap> = taps.iter().map(|&(l, s)| ActivationTap::last(l, s)).collect();
    let mut parts: Vec<Vec<Matrix>> = vec![Vec::new(); taps.len()];
    for chunk in queries.chunks(EXTRACT_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|q| q.prompt_tokens.as_slice()).collect();
        let run = run_batch(
            weights,
            config,
            &seqs,
            BatchOptions {
                taps: &taps,
                steer: None,
                keep_cache: false,
                logit_rows: Some(&[]),
            },
        )?;
        for (p, m) in parts.iter_mut().zip(run.captures) {
            p.push(m);
        }
    }
    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    Ok(taps
        .iter()
        .zip(parts)
        .map(|(tap, chunks)| {
            let width = match tap.stream_point {
                StreamPoint::FfIntermediate => config.d_ff,
                _ => config.d_model,
            };
            let mut data = Vec::with_capacity(queries.len() * width);
            for c in chunks {
                data.extend(c.into_vec());
            }
            let rows = Matrix::from_vec(queries.len(), width, data).expect("row count matches");
            ActivationMatrix {
                layer_index: tap.layer_index,
                stream_point: tap.stream_point,
                position_policy: PositionPolicy::LastToken,
                ids: ids.clone(),
                rows,
            }
        })
        .collect())
}

pub fn extract_activations(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[&QueryRecord],
    layer: usize,
    stream_point: StreamPoint,
) -> Result<ActivationMatrix> {
    if stream_point == StreamPoint::FfIntermediate {
        return Err(CasalError::InvalidInput(
            "activation matrices hold d_model residual rows; use a residual stream point".into(),
        ));
    }
    Ok(extract_many(weights, config, queries, &[(layer, stream_point)])?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPack {
    pub mean_known: Vec<f64>,
    pub mean_unknown: Vec<f64>,
    /// `ā_u − ā_k`
    pub v_unknown: Vec<f64>,
    /// `ā_k − ā_u`
    pub v_known: Vec<f64>,
    pub alpha: f64,
    pub layer: usize,
    #[serde(default)]
    pub train_known_ids: Vec<String>,
    #[serde(default)]
    pub train_unknown_ids: Vec<String>,
    #[serde(default)]
    pub split_hash: String,
}

/// Column means with each column sorted before summation, so the result
/// does not depend on row order.
fn column_means(m: &Matrix) -> Vec<f64> {
    let mut col = vec![0.0; m.rows()];
    (0..m.cols())
        .map(|c| {
            for (r, v) in col.iter_mut().enumerate() {
                *v = m.get(r, c);
            }
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / m.rows() as f64
        })
        .collect()
}

pub fn compute_steering_pack(known: &Matrix, unknown: &Matrix, alpha: f64, layer: usize) -> Result<SteeringPack> {
    if known.rows() == 0 || unknown.rows() == 0 {
        return Err(CasalError::DegenerateSplit(format!(
            "steering needs both sets nonempty (known {}, unknown {})",
            known.rows(),
            unknown.rows()
        )));
    }
    if known.cols() != unknown.cols() {
        return Err(crate::error::shape_err("activation width", &[known.cols()], &[unknown.cols()]));
    }
    if !known.all_finite() || !unknown.all_finite() {
        return Err(CasalError::NonFinite("activations".into()));
    }
    let mean_known = column_means(known);
    let mean_unknown = column_means(unknown);
    let v_unknown: Vec<f64> = mean_unknown.iter().zip(&mean_known).map(|(u, k)| u - k).collect();
    let v_known: Vec<f64> = v_unknown.iter().map(|v| -v).collect();
    Ok(SteeringPack {
        mean_known,
        mean_unknown,
        v_unknown,
        v_known,
        alpha,
        layer,
        train_known_ids: Vec::new(),
        train_unknown_ids: Vec::new(),
        split_hash: String::new(),
    })
}

impl SteeringPack {
    pub fn vector(&self, label: Label) -> &[f64] {
        match label {
            Label::Known => &self.v_known,
            Label::Unknown => &self.v_unknown,
        }
    }

    /// `α · v_u`
    pub fn scaled_unknown(&self, alpha: f64) -> Vec<f64> {
        self.v_unknown.iter().map(|v| alpha * v).collect()
    }
}

/// `t(x) = a(x) + α·v_label`, row by row.
pub fn make_targets(acts: &Matrix, pack: &SteeringPack, label: Label) -> Result<Matrix> {
    let v = pack.vector(label);
    if acts.cols() != v.len() {
        return Err(crate::error::shape_err("activations", &[acts.rows(), v.len()], &acts.shape()));
    }
    let mut out = acts.clone();
    for r in 0..out.rows() {
        for (o, vi) in out.row_mut(r).iter_mut().zip(v) {
            *o += pack.alpha * vi;
        }
    }
    Ok(out)
}

/// Inference-time steering: `α·v_u` added to the post-layer residual at
/// `layer` during every decoding step. Weights are not modified.
#[allow(clippy::too_many_arguments)]
pub fn caa_generate(
    weights: &TransformerWeights,
    config: &ModelConfig,
    query: &QueryRecord,
    pack: &SteeringPack,
    layer: usize,
    alpha: f64,
    position_policy: PositionPolicy,
    sampling: &SamplingConfig,
) -> Result<Vec<u32>> {
    if pack.layer != layer {
        return Err(CasalError::LayerMismatch {
            pack: pack.layer,
            requested: layer,
        });
    }
    let v = pack.scaled_unknown(alpha);
    let steer = ResidualSteer {
        layer,
        vector: &v,
        positions: position_policy,
    };
    sample_completion_steered(weights, config, &query.prompt_tokens, sampling, Some(steer))
}

/// Greedy CAA decoding over many queries.
#[allow(clippy::too_many_arguments)]
pub fn caa_greedy(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[&QueryRecord],
    pack: &SteeringPack,
    layer: usize,
    alpha: f64,
    position_policy: PositionPolicy,
    max_new_tokens: usize,
    stop_tokens: &[u32],
) -> Result<Vec<Vec<u32>>> {
    if pack.layer != layer {
        return Err(CasalError::LayerMismatch {
            pack: pack.layer,
            requested: layer,
        });
    }
    let v = pack.scaled_unknown(alpha);
    let prompts: Vec<&[u32]> = queries.iter().map(|q| q.prompt_tokens.as_slice()).collect();
    greedy_completions(
        weights,
        config,
        &prompts,
        max_new_tokens,
        stop_tokens,
        Some(ResidualSteer {
            layer,
            vector: &v,
            positions: position_policy,
        }),
    )
}

/// Deterministic 50/50 partition of ids by hash: `(train, eval)`.
pub fn hash_halves(ids: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    ids.iter().cloned().partition(|id| derive_seed(seed, id) % 2 == 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub alpha: f64,
    pub halluc_unknown: f64,
    pub acc_known: f64,
    pub refusal_known: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub alpha: f64,
    /// False when no candidate met the accuracy budget.
    pub within_budget: bool,
    pub rows: Vec<LayerRow>,
}

/// Minimum hallucination among rows whose known-accuracy drop from
/// `baseline_acc` is within `budget`; ties go to the smaller drop, then the
/// lower layer (then the smaller α). When nothing fits the budget the row
/// with the smallest drop wins and the result is flagged.
pub fn choose_layer(rows: &[LayerRow], baseline_acc: f64, budget: f64) -> Result<LayerSelection> {
    if rows.is_empty() {
        return Err(CasalError::InvalidInput("no candidate layers".into()));
    }
    // small slack so a drop of exactly `budget` is not lost to rounding
    let fits = |r: &LayerRow| baseline_acc - r.acc_known <= budget + 1e-12;
    let key = |r: &LayerRow| (baseline_acc - r.acc_known, r.layer, r.alpha);
    let cmp_tail = |a: &LayerRow, b: &LayerRow| {
        let (da, la, aa) = key(a);
        let (db, lb, ab) = key(b);
        da.total_cmp(&db).then(la.cmp(&lb)).then(aa.total_cmp(&ab))
    };
    let within: Vec<&LayerRow> = rows.iter().filter(|r| fits(r)).collect();
    let (best, ok) = if within.is_empty() {
        (rows.iter().min_by(|a, b| cmp_tail(a, b)).expect("nonempty"), false)
    } else {
        (
            *within
                .iter()
                .min_by(|a, b| a.halluc_unknown.total_cmp(&b.halluc_unknown).then(cmp_tail(a, b)))
                .expect("nonempty"),
            true,
        )
    };
    if !ok {
        log::warn!("no layer met the {budget} accuracy budget; using layer {}", best.layer);
    }
    Ok(LayerSelection {
        layer: best.layer,
        alpha: best.alpha,
        within_budget: ok,
        rows: rows.to_vec(),
    })
}

/// CAA sweep over candidate packs (one per layer) and strengths, then
/// [`choose_layer`] against the unsteered baseline.
pub fn select_layer(
    weights: &TransformerWeights,
    config: &ModelConfig,
    eval: &EvalSet,
    packs: &[SteeringPack],
    alphas: &[f64],
    position_policy: PositionPolicy,
    budget: f64,
) -> Result<(Behavior, LayerSelection)> {
    if eval.known.is_empty() || eval.unknown.is_empty() {
        return Err(CasalError::DegenerateSplit("layer selection needs known and unknown queries".into()));
    }
    let baseline = eval.run(weights, config, None)?.behavior;
    let mut rows = Vec::with_capacity(packs.len() * alphas.len());
    for pack in packs {
        for &alpha in alphas {
            let v = pack.scaled_unknown(alpha);
            let steer = ResidualSteer {
                layer: pack.layer,
                vector: &v,
                positions: position_policy,
            };
            let b = eval.run(weights, config, Some(steer))?.behavior;
            rows.push(LayerRow {
                layer: pack.layer,
                alpha,
                halluc_unknown: b.halluc_unknown,
                acc_known: b.acc_known,
                refusal_known: b.refusal_known,
            });
        }
    }
    Ok((baseline, choose_layer(&rows, baseline.acc_known, budget)?))
}

pub fn layer_rows_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from("layer,alpha,halluc_unknown,acc_known,refusal_known\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.layer, r.alpha, r.halluc_unknown, r.acc_known, r.refusal_known
        ));
    }
    s
}

pub const PACK_MAGIC: &[u8; 8] = b"CASALSP1";

#[derive(Serialize, Deserialize)]
struct PackHeader {
    layer: usize,
    alpha: f64,
    split_hash: String,
    train_known_ids: Vec<String>,
    train_unknown_ids: Vec<String>,
}

impl SteeringPack {
    pub fn to_container(&self) -> Container {
        let header = PackHeader {
            layer: self.layer,
            alpha: self.alpha,
            split_hash: self.split_hash.clone(),
            train_known_ids: self.train_known_ids.clone(),
            train_unknown_ids: self.train_unknown_ids.clone(),
        };
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
        Container {
            magic: *PACK_MAGIC,
            header: toml::to_string(&header).expect("pack header serializes"),
            tensors: vec![
                ("mean_known".into(), row(&self.mean_known)),
                ("mean_unknown".into(), row(&self.mean_unknown)),
                ("v_unknown".into(), row(&self.v_unknown)),
                ("v_known".into(), row(&self.v_known)),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h: PackHeader =
            toml::from_str(&c.header).map_err(|e| CasalError::Format(format!("pack header: {e}")))?;
        let v = |name: &str| -> Result<Vec<f64>> { Ok(c.tensor(name)?.as_slice().to_vec()) };
        Ok(Self {
            mean_known: v("mean_known")?,
            mean_unknown: v("mean_unknown")?,
            v_unknown: v("v_unknown")?,
            v_known: v("v_known")?,
            alpha: h.alpha,
            layer: h.layer,
            train_known_ids: h.train_known_ids,
            train_unknown_ids: h.train_unknown_ids,
            split_hash: h.split_hash,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, PACK_MAGIC)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(layer: usize, h: f64, a: f64) -> LayerRow {
        LayerRow {
            layer,
            alpha: 4.0,
            halluc_unknown: h,
            acc_known: a,
            refusal_known: 0.0,
        }
    }

    #[test]
    fn budget_rule_on_hand_table() {
        let rows = [row(1, 0.40, 0.90), row(2, 0.20, 0.88), row(3, 0.10, 0.60)];
        let sel = choose_layer(&rows, 0.90, 0.05).unwrap();
        assert_eq!(sel.layer, 2);
        assert!(sel.within_budget);
    }

    #[test]
    fn ties_and_fallback() {
        let same = [row(3, 0.2, 0.9), row(1, 0.2, 0.9), row(2, 0.2, 0.9)];
        assert_eq!(choose_layer(&same, 0.9, 0.05).unwrap().layer, 1);
        let none = [row(1, 0.1, 0.5), row(2, 0.3, 0.7)];
        let sel = choose_layer(&none, 0.9, 0.05).unwrap();
        assert_eq!(sel.layer, 2);
        assert!(!sel.within_budget);
        assert_eq!(choose_layer(&[row(4, 0.9, 0.1)], 0.9, 0.05).unwrap().layer, 4);
    }

    #[test]
    fn hash_halves_is_a_partition() {
        let ids: Vec<String> = (0..100).map(|i| format!("q{i}")).collect();
        let (a, b) = hash_halves(&ids, 3);
        assert_eq!(a.len() + b.len(), 100);
        assert!(a.len() > 30 && b.len() > 30);
        assert!(a.iter().all(|x| !b.contains(x)));
    }
}
