//! Amortized single-submodule training: one feed-forward submodule of layer
//! `L*` is fitted so that the layer output lands on steered targets, then
//! substituted back into the model.
//!
//! The trainable map is `â = h + FFN(rmsnorm(h))`, where `h` is the cached
//! residual after layer `L*`'s attention at the last prompt token. Attention,
//! norms and (for MoE) the router stay frozen, so `h`, the normalized input
//! and the routing are fixed per cached row.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{sha256_hex, Container};
use crate::corpus::QueryRecord;
use crate::error::{CasalError, Result};
use crate::metrics::silhouette;
use crate::model::backward::ffn_backward;
use crate::model::forward::rms_norm;
use crate::model::moe::{ffn_trace, route, FfnTrace, Routing};
use crate::model::substitute::substitute_ffn;
use crate::model::{
    extract_submodule, substitute_weights, weights_digest, DenseFfn, FeedForward, ModelConfig, StreamPoint,
    Submodule, TransformerWeights,
};
use crate::steer::{extract_many, make_targets, Label, SteeringPack};
use crate::tensor::Matrix;

/// Trainable copy of one submodule plus the frozen context around it.
#[derive(Debug, Clone)]
pub struct CasalSubnetwork {
    pub layer: usize,
    pub submodule: Submodule,
    /// Current values, ordered as in [`extract_submodule`].
    pub tensors: Vec<Matrix>,
    frozen: FeedForward,
    ffn_norm: Matrix,
    top_k: usize,
}

impl CasalSubnetwork {
    pub fn new(
        weights: &TransformerWeights,
        config: &ModelConfig,
        layer: usize,
        submodule: Submodule,
    ) -> Result<Self> {
        if layer >= config.n_layer {
            return Err(CasalError::InvalidInput(format!(
                "layer {layer} out of range for {} layers",
                config.n_layer
            )));
        }
        let tensors = extract_submodule(weights, layer, &submodule)?;
        let lw = &weights.layers[layer];
        let top_k = match &lw.ffn {
            FeedForward::Dense(_) => 1,
            FeedForward::Moe { .. } => config
                .moe
                .ok_or_else(|| CasalError::InvalidConfig("MoE weights with a dense config".into()))?
                .top_k,
        };
        Ok(Self {
            layer,
            submodule,
            tensors,
            frozen: lw.ffn.clone(),
            ffn_norm: lw.ffn_norm.clone(),
            top_k,
        })
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.frozen, FeedForward::Moe { .. })
    }

    /// The source feed-forward block, unmodified.
    pub fn frozen_block(&self) -> &FeedForward {
        &self.frozen
    }

    /// Expert selection for every cached row (`None` for dense layers).
    pub fn routing(&self, cache: &TrainBatchCache) -> Result<Option<Routing>> {
        Ok(Prepared::new(self, cache)?.routing)
    }

    fn block(&self, tensors: &[Matrix]) -> Result<FeedForward> {
        substitute_ffn(&self.frozen, self.layer, &self.submodule, tensors.to_vec())
    }
}

/// Training rows for one target layer, aligned by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatchCache {
    pub layer: usize,
    pub alpha: f64,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    /// `a^{L*−1}` at the last prompt token.
    pub inputs: Matrix,
    /// Residual after layer `L*`'s attention at the last prompt token.
    pub post_attention: Matrix,
    /// The model's own `a^{L*}` rows.
    pub activations: Matrix,
    /// `w_down` inputs, dense layers only.
    pub intermediates: Option<Matrix>,
    pub targets: Matrix,
}

/// Caches every row of `known_ids` and `unknown_ids` with one forward pass
/// per query and builds steered targets from `pack`.
pub fn build_cache(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[QueryRecord],
    known_ids: &[String],
    unknown_ids: &[String],
    pack: &SteeringPack,
    layer: usize,
) -> Result<TrainBatchCache> {
    if pack.layer != layer {
        return Err(CasalError::LayerMismatch {
            pack: pack.layer,
            requested: layer,
        });
    }
    if layer >= config.n_layer {
        return Err(CasalError::InvalidInput(format!("layer {layer} out of range")));
    }
    let by_id: std::collections::HashMap<&str, &QueryRecord> =
        queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(known_ids.len() + unknown_ids.len());
    let mut labels = Vec::with_capacity(rows.capacity());
    for (ids, label) in [(known_ids, Label::Known), (unknown_ids, Label::Unknown)] {
        for id in ids {
            let q = by_id
                .get(id.as_str())
                .ok_or_else(|| CasalError::InvalidInput(format!("split id {id} has no query record")))?;
            if !seen.insert(id.as_str()) {
                return Err(CasalError::DuplicateId { id: id.clone(), line: 0 });
            }
            rows.push(*q);
            labels.push(label);
        }
    }
    if rows.is_empty() {
        return Err(CasalError::DegenerateSplit("no rows to cache".into()));
    }
    let dense = matches!(weights.layers[layer].ffn, FeedForward::Dense(_));
    let mut taps = vec![
        (layer, StreamPoint::PreLayer),
        (layer, StreamPoint::PostAttention),
        (layer, StreamPoint::PostLayer),
    ];
    if dense {
        taps.push((layer, StreamPoint::FfIntermediate));
    }
    let mut acts = extract_many(weights, config, &rows, &taps)?.into_iter().map(|a| a.rows);
    let inputs = acts.next().expect("tap");
    let post_attention = acts.next().expect("tap");
    let activations = acts.next().expect("tap");
    let intermediates = acts.next();

    let mut targets = Matrix::zeros(activations.rows(), activations.cols());
    for label in [Label::Known, Label::Unknown] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        let t = make_targets(&activations.select_rows(&idx), pack, label)?;
        for (j, &i) in idx.iter().enumerate() {
            targets.row_mut(i).copy_from_slice(t.row(j));
        }
    }
    Ok(TrainBatchCache {
        layer,
        alpha: pack.alpha,
        ids: rows.iter().map(|q| q.id.clone()).collect(),
        labels,
        inputs,
        post_attention,
        activations,
        intermediates,
        targets,
    })
}

pub const CACHE_MAGIC: &[u8; 8] = b"CASALTC1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    layer: usize,
    d_model: usize,
    alpha: f64,
    rows: usize,
    stream_points: Vec<String>,
    ids: Vec<String>,
    labels: Vec<Label>,
}

impl TrainBatchCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = vec![
            ("inputs".to_string(), self.inputs.clone()),
            ("post_attention".to_string(), self.post_attention.clone()),
            ("activations".to_string(), self.activations.clone()),
        ];
        let mut points = vec!["pre_layer", "post_attention", "post_layer"];
        if let Some(m) = &self.intermediates {
            tensors.push(("intermediates".into(), m.clone()));
            points.push("ff_intermediate");
        }
        tensors.push(("targets".into(), self.targets.clone()));
        let header = CacheHeader {
            layer: self.layer,
            d_model: self.inputs.cols(),
            alpha: self.alpha,
            rows: self.len(),
            stream_points: points.into_iter().map(String::from).collect(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        Container {
            magic: *CACHE_MAGIC,
            header: serde_json::to_string(&header).expect("cache header serializes"),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h: CacheHeader = serde_json::from_str(&c.header)?;
        if h.ids.len() != h.rows || h.labels.len() != h.rows {
            return Err(CasalError::Format("cache header row count disagrees with ids/labels".into()));
        }
        let get = |name: &str| -> Result<Matrix> {
            let m = c.tensor(name)?.clone();
            if m.rows() != h.rows {
                return Err(CasalError::Format(format!("cache tensor {name} has {} rows", m.rows())));
            }
            Ok(m)
        };
        let intermediates = if h.stream_points.iter().any(|p| p == "ff_intermediate") {
            Some(get("intermediates")?)
        } else {
            None
        };
        let out = Self {
            layer: h.layer,
            alpha: h.alpha,
            ids: h.ids,
            labels: h.labels,
            inputs: get("inputs")?,
            post_attention: get("post_attention")?,
            activations: get("activations")?,
            intermediates,
            targets: get("targets")?,
        };
        out.inputs.ensure_shape("inputs", h.rows, h.d_model)?;
        out.targets.ensure_shape("targets", h.rows, h.d_model)?;
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, CACHE_MAGIC)?)
    }
}

/// Per-row values that do not depend on the trainable tensors.
struct Prepared {
    xn: Matrix,
    routing: Option<Routing>,
}

impl Prepared {
    fn new(sub: &CasalSubnetwork, cache: &TrainBatchCache) -> Result<Self> {
        if cache.layer != sub.layer {
            return Err(CasalError::LayerMismatch {
                pack: cache.layer,
                requested: sub.layer,
            });
        }
        let (xn, _) = rms_norm(&cache.post_attention, &sub.ffn_norm);
        let routing = match &sub.frozen {
            FeedForward::Dense(_) => None,
            FeedForward::Moe { router, .. } => Some(route(&xn, router, sub.top_k)?),
        };
        Ok(Self { xn, routing })
    }
}

enum BlockTrace {
    Dense(Matrix, FfnTrace),
    /// Per expert: (local row, routing weight) pairs, inputs and trace.
    Moe(Vec<(Vec<(usize, f64)>, Matrix, FfnTrace)>),
}

/// `â` for the given cache rows through `block`.
fn predict(prep: &Prepared, cache: &TrainBatchCache, block: &FeedForward, rows: &[usize]) -> (Matrix, BlockTrace) {
    let x = prep.xn.select_rows(rows);
    let mut pred = cache.post_attention.select_rows(rows);
    match block {
        FeedForward::Dense(f) => {
            let trace = ffn_trace(&x, f);
            pred.add_assign(&trace.out);
            (pred, BlockTrace::Dense(x, trace))
        }
        FeedForward::Moe { experts, .. } => {
            let routing = prep.routing.as_ref().expect("MoE rows are routed");
            let mut groups: Vec<Vec<(usize, f64)>> = vec![Vec::new(); experts.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (&e, &w) in routing.selected[r].iter().zip(&routing.weights[r]) {
                    groups[e].push((i, w));
                }
            }
            groups.iter_mut().for_each(|g| g.sort_by_key(|&(i, _)| i));
            let mut out = Matrix::zeros(x.rows(), x.cols());
            let mut traces = Vec::with_capacity(experts.len());
            for (f, group) in experts.iter().zip(groups) {
                let local: Vec<usize> = group.iter().map(|&(i, _)| i).collect();
                let xe = x.select_rows(&local);
                let trace = ffn_trace(&xe, f);
                for (j, &(i, w)) in group.iter().enumerate() {
                    for (o, y) in out.row_mut(i).iter_mut().zip(trace.out.row(j)) {
                        *o += w * y;
                    }
                }
                traces.push((group, xe, trace));
            }
            pred.add_assign(&out);
            (pred, BlockTrace::Moe(traces))
        }
    }
}

/// Loss decomposition `L_total = L_u + L_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CasalLoss {
    pub unknown: f64,
    pub known: f64,
    pub total: f64,
}

struct Evaluated {
    loss: CasalLoss,
    grad: Option<Vec<Matrix>>,
}

/// Loss (and optionally gradient) over `rows`. With `strict`, a label with
/// no rows is an error; otherwise its term is zero.
fn evaluate(
    sub: &CasalSubnetwork,
    prep: &Prepared,
    cache: &TrainBatchCache,
    tensors: &[Matrix],
    rows: &[usize],
    want_grad: bool,
    strict: bool,
) -> Result<Evaluated> {
    let n_u = rows.iter().filter(|&&r| cache.labels[r] == Label::Unknown).count();
    let n_k = rows.len() - n_u;
    if strict && (n_u == 0 || n_k == 0) {
        return Err(CasalError::DegenerateSplit(format!(
            "loss needs both labels (known {n_k}, unknown {n_u})"
        )));
    }
    let block = sub.block(tensors)?;
    let (pred, trace) = predict(prep, cache, &block, rows);
    let (mut sum_u, mut sum_k) = (0.0, 0.0);
    let mut d_pred = Matrix::zeros(pred.rows(), pred.cols());
    for (i, &r) in rows.iter().enumerate() {
        let unknown = cache.labels[r] == Label::Unknown;
        let n = if unknown { n_u } else { n_k } as f64;
        let mut sq = 0.0;
        for ((d, p), t) in d_pred.row_mut(i).iter_mut().zip(pred.row(i)).zip(cache.targets.row(r)) {
            let diff = p - t;
            sq += diff * diff;
            *d = 2.0 * diff / n;
        }
        if unknown {
            sum_u += sq;
        } else {
            sum_k += sq;
        }
    }
    let unknown = if n_u > 0 { sum_u / n_u as f64 } else { 0.0 };
    let known = if n_k > 0 { sum_k / n_k as f64 } else { 0.0 };
    let loss = CasalLoss {
        unknown,
        known,
        total: unknown + known,
    };
    if !want_grad {
        return Ok(Evaluated { loss, grad: None });
    }
    let part = sub.submodule.part();
    let pick = |g: DenseFfn, out: &mut Vec<Matrix>| {
        if part.has_up() {
            out.push(g.w_up.clone());
        }
        if part.has_down() {
            out.push(g.w_down);
        }
    };
    let mut grads = Vec::with_capacity(tensors.len());
    match (&block, trace, &sub.submodule) {
        (FeedForward::Dense(f), BlockTrace::Dense(x, t), _) => {
            let mut g = DenseFfn::zeros(f.w_up.rows(), f.w_up.cols());
            ffn_backward(&x, f, &t, &d_pred, &mut g);
            pick(g, &mut grads);
        }
        (FeedForward::Moe { experts, .. }, BlockTrace::Moe(traces), Submodule::ExpertSet { experts: ids, .. }) => {
            for &e in ids {
                let f = &experts[e];
                let (group, xe, t) = &traces[e];
                let mut g = DenseFfn::zeros(f.w_up.rows(), f.w_up.cols());
                if !group.is_empty() {
                    let mut d_out = Matrix::zeros(group.len(), d_pred.cols());
                    for (j, &(i, w)) in group.iter().enumerate() {
                        for (o, d) in d_out.row_mut(j).iter_mut().zip(d_pred.row(i)) {
                            *o = w * d;
                        }
                    }
                    ffn_backward(xe, f, t, &d_out, &mut g);
                }
                pick(g, &mut grads);
            }
        }
        _ => unreachable!("block and trace agree"),
    }
    Ok(Evaluated {
        loss,
        grad: Some(grads),
    })
}

fn all_rows(cache: &TrainBatchCache) -> Vec<usize> {
    (0..cache.len()).collect()
}

/// Mean squared distance to the targets per label, with `â` recomputed
/// through the subnetwork.
pub fn casal_loss(sub: &CasalSubnetwork, cache: &TrainBatchCache) -> Result<CasalLoss> {
    let prep = Prepared::new(sub, cache)?;
    Ok(evaluate(sub, &prep, cache, &sub.tensors, &all_rows(cache), false, true)?.loss)
}

/// Gradient of `L_total` with respect to the trainable tensors.
pub fn analytic_gradient(sub: &CasalSubnetwork, cache: &TrainBatchCache) -> Result<Vec<Matrix>> {
    let prep = Prepared::new(sub, cache)?;
    Ok(evaluate(sub, &prep, cache, &sub.tensors, &all_rows(cache), true, true)?
        .grad
        .expect("gradient requested"))
}

/// `â` rows for the whole cache with the current tensors.
pub fn predicted_activations(sub: &CasalSubnetwork, cache: &TrainBatchCache) -> Result<Matrix> {
    let prep = Prepared::new(sub, cache)?;
    let block = sub.block(&sub.tensors)?;
    Ok(predict(&prep, cache, &block, &all_rows(cache)).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CasalTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Rows per update; `None` is full-batch gradient descent.
    pub batch_size: Option<usize>,
    /// Shuffle seed for mini-batches.
    pub seed: u64,
    /// Keep a copy of the tensors every this many updates (plus the start
    /// and the end of training).
    pub snapshot_every: Option<usize>,
}

impl Default for CasalTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 3,
            batch_size: None,
            seed: 0,
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: CasalLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub layer: usize,
    pub submodule: Submodule,
    pub config: CasalTrainConfig,
    /// Full-cache loss before any update.
    pub initial: CasalLoss,
    /// Full-cache loss after each completed epoch.
    pub epochs: Vec<EpochLoss>,
    pub final_tensors: Vec<Matrix>,
    /// `(update count, tensors)` checkpoints when snapshots are enabled.
    pub snapshots: Vec<(usize, Vec<Matrix>)>,
    pub steps: usize,
    /// Step at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
    /// Silhouette of `â` rows by label, before and after training.
    pub silhouette_before: Option<f64>,
    pub silhouette_after: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> CasalLoss {
        self.epochs.last().map(|e| e.loss).unwrap_or(self.initial)
    }
}

fn label_silhouette(points: &Matrix, cache: &TrainBatchCache) -> Option<f64> {
    let labels: Vec<bool> = cache.labels.iter().map(|&l| l == Label::Known).collect();
    silhouette(points, &labels).ok()
}

/// Gradient descent on the trainable tensors. Full-batch by default; with a
/// batch size, each update uses `mean_u + mean_k` over the rows of a
/// shuffled batch. A non-finite loss stops training and keeps the tensors
/// from the last finite full-cache evaluation.
pub fn train(sub: &CasalSubnetwork, cache: &TrainBatchCache, config: &CasalTrainConfig) -> Result<TrainReport> {
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(CasalError::InvalidConfig(format!("lr must be finite and ≥ 0, got {}", config.lr)));
    }
    if config.batch_size == Some(0) || config.snapshot_every == Some(0) {
        return Err(CasalError::InvalidConfig("batch_size and snapshot_every must be positive".into()));
    }
    let start = Instant::now();
    let prep = Prepared::new(sub, cache)?;
    let rows = all_rows(cache);
    let initial = evaluate(sub, &prep, cache, &sub.tensors, &rows, false, true)?.loss;
    let block = sub.block(&sub.tensors)?;
    let silhouette_before = label_silhouette(&predict(&prep, cache, &block, &rows).0, cache);

    let mut tensors = sub.tensors.clone();
    let mut good = tensors.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut diverged_at = None;
    let mut steps = 0;
    let mut snapshots = Vec::new();
    if config.snapshot_every.is_some() {
        snapshots.push((0, tensors.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if !initial.total.is_finite() {
        diverged_at = Some(0);
    }
    let batch = config.batch_size.unwrap_or(rows.len()).min(rows.len());
    'outer: for epoch in 1..=config.epochs {
        if diverged_at.is_some() {
            break;
        }
        let mut order = rows.clone();
        if config.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let ev = evaluate(sub, &prep, cache, &tensors, chunk, true, false)?;
            if !ev.loss.total.is_finite() {
                diverged_at = Some(steps);
                break 'outer;
            }
            for (t, g) in tensors.iter_mut().zip(ev.grad.expect("gradient requested")) {
                t.axpy(-config.lr, &g);
            }
            steps += 1;
            if config.snapshot_every.is_some_and(|n| steps % n == 0) {
                snapshots.push((steps, tensors.clone()));
            }
        }
        let loss = evaluate(sub, &prep, cache, &tensors, &rows, false, true)?.loss;
        if !loss.total.is_finite() {
            diverged_at = Some(steps);
            break;
        }
        good.clone_from(&tensors);
        epochs.push(EpochLoss { epoch, loss });
    }
    if diverged_at.is_some() {
        log::warn!("training stopped at step {steps}: non-finite loss; keeping last good tensors");
    }
    if config.snapshot_every.is_some() && snapshots.last().map(|(s, _)| *s) != Some(steps) && diverged_at.is_none() {
        snapshots.push((steps, good.clone()));
    }
    let block = sub.block(&good)?;
    let silhouette_after = label_silhouette(&predict(&prep, cache, &block, &rows).0, cache);
    Ok(TrainReport {
        layer: sub.layer,
        submodule: sub.submodule.clone(),
        config: *config,
        initial,
        epochs,
        final_tensors: good,
        snapshots,
        steps,
        diverged_at,
        silhouette_before,
        silhouette_after,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Training restricted to expert projections of an MoE layer; the router is
/// never touched, so routing of every cached row is fixed.
pub fn train_moe(sub: &CasalSubnetwork, cache: &TrainBatchCache, config: &CasalTrainConfig) -> Result<TrainReport> {
    if !sub.is_moe() || !matches!(sub.submodule, Submodule::ExpertSet { .. }) {
        return Err(CasalError::InvalidConfig(
            "MoE training needs an MoE layer and a moe_experts_* submodule".into(),
        ));
    }
    train(sub, cache, config)
}

/// Writes the trained tensors into a copy of the full model.
pub fn finalize(
    weights: &TransformerWeights,
    report: &TrainReport,
    submodule: &Submodule,
    layer: usize,
) -> Result<TransformerWeights> {
    substitute_weights(weights, layer, submodule, report.final_tensors.clone())
}

/// Links a training run to its inputs and output by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub layer: usize,
    pub submodule: String,
    pub alpha: f64,
    pub train: CasalTrainConfig,
    pub probe_config_hash: String,
    pub pack_hash: String,
    pub input_checkpoint: String,
    pub output_checkpoint: String,
    pub initial_loss: CasalLoss,
    pub final_loss: CasalLoss,
    pub diverged_at: Option<usize>,
}

/// [`finalize`] plus the manifest for the resulting checkpoint.
pub fn finalize_with_manifest(
    weights: &TransformerWeights,
    config: &ModelConfig,
    report: &TrainReport,
    pack: &SteeringPack,
    probe_config_hash: &str,
) -> Result<(TransformerWeights, RunManifest)> {
    let out = finalize(weights, report, &report.submodule, report.layer)?;
    let manifest = RunManifest {
        layer: report.layer,
        submodule: report.submodule.label(),
        alpha: pack.alpha,
        train: report.config,
        probe_config_hash: probe_config_hash.to_string(),
        pack_hash: sha256_hex(&pack.to_container().to_bytes()),
        input_checkpoint: weights_digest(weights, config),
        output_checkpoint: weights_digest(&out, config),
        initial_loss: report.initial,
        final_loss: report.final_loss(),
        diverged_at: report.diverged_at,
    };
    Ok((out, manifest))
}
