//! Stage implementations. Every stage reads its inputs from the run
//! directory and writes its outputs there, so stages can be resumed or
//! rerun in isolation.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use casal_core::casal::{
    build_cache, finalize_with_manifest, train, train_moe, CasalLoss, CasalSubnetwork, CasalTrainConfig, EpochLoss,
    TrainBatchCache, TrainReport,
};
use casal_core::container::{sha256_file, sha256_hex};
use casal_core::corpus::{
    generate_fact_world, load_qa_records, sft_finetune, write_qa_records, pretrain_toy_model, QueryRecord, SftPair,
};
use casal_core::eval::{Behavior, EvalOutput, EvalSet};
use casal_core::flops::{self, ForwardTerms};
use casal_core::metrics::{metrics_csv, silhouette, spearman, CompletionRecord, MetricsRow};
use casal_core::model::{
    load_checkpoint, save_checkpoint, substitute_weights, ModelConfig, ResidualSteer, SamplingConfig, StreamPoint,
    Submodule, TransformerWeights,
};
use casal_core::probe::{probe_run, sweep_csv, threshold_sweep, ProbeConfig, ProbeRun, SplitFile};
use casal_core::steer::{
    compute_steering_pack, extract_many, hash_halves, layer_rows_csv, select_layer, LayerRow, LayerSelection,
    SteeringPack,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ALL_STAGES};
use crate::manifest::{hash_tree, RunManifest, StageRecord};

pub const BASE_CKPT: &str = "checkpoints/base.ckpt";
pub const CASAL_CKPT: &str = "checkpoints/casal.ckpt";
pub const SFT_CKPT: &str = "checkpoints/sft.ckpt";
pub const SNAPSHOT_DIR: &str = "checkpoints/snapshots";
pub const QUERIES: &str = "corpus/queries.jsonl";
pub const CORPUS_INFO: &str = "corpus/info.json";
pub const PROBE_RUN: &str = "splits/probe_run.json";
pub const HALVES: &str = "splits/halves.json";
pub const SELECTION: &str = "splits/selection.json";
pub const PACK_DIR: &str = "packs";

/// Token conventions of the query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub abstain_token: u32,
    pub stop_tokens: Vec<u32>,
    pub n_queries: usize,
    pub synthetic: bool,
}

/// Train / held-out halves of the known and unknown sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halves {
    pub tau: usize,
    pub train_known: Vec<String>,
    pub train_unknown: Vec<String>,
    pub eval_known: Vec<String>,
    pub eval_unknown: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    /// Unsteered behavior on the training halves.
    pub baseline: Option<Behavior>,
    pub selection: LayerSelection,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub layer: usize,
    pub n_known: usize,
    pub n_unknown: usize,
    pub behavior: Behavior,
    /// Held-out known/unknown separation of `a^{L*}`.
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub layer: usize,
    pub submodule: String,
    pub config: CasalTrainConfig,
    pub rows: usize,
    pub initial: CasalLoss,
    pub epochs: Vec<EpochLoss>,
    pub steps: usize,
    pub diverged_at: Option<usize>,
    pub silhouette_before: Option<f64>,
    pub silhouette_after: Option<f64>,
    pub snapshot_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub step: usize,
    pub silhouette: f64,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: usize,
    pub layer: usize,
    pub n_known: usize,
    pub n_unknown: usize,
    pub baseline: Behavior,
    pub casal: Behavior,
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub fraction: f64,
    pub rows: usize,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub layer: usize,
    pub baseline: Behavior,
    pub casal: Behavior,
    pub caa: Option<Behavior>,
    pub sft: Option<Behavior>,
    pub relative_reduction: f64,
    pub silhouette_before: Option<f64>,
    pub silhouette_after: Option<f64>,
    pub checkpoint_spearman: Option<f64>,
}

/// Relative drop of `after` below `before`.
pub fn relative_reduction(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (before - after) / before
    }
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub dir: PathBuf,
}

impl Run<'_> {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn ensure_parent(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<String> {
        std::fs::write(self.ensure_parent(rel)?, text)?;
        Ok(rel.to_string())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let text = std::fs::read_to_string(&p).with_context(|| format!("missing input {rel}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {rel}"))
    }

    fn save_ckpt(&self, rel: &str, w: &TransformerWeights, mc: &ModelConfig) -> Result<String> {
        save_checkpoint(&self.ensure_parent(rel)?, w, mc)?;
        Ok(rel.to_string())
    }

    fn load_ckpt(&self, rel: &str) -> Result<(ModelConfig, TransformerWeights)> {
        load_checkpoint(&self.path(rel)).with_context(|| format!("missing input {rel}"))
    }

    fn queries(&self) -> Result<Vec<QueryRecord>> {
        load_qa_records(&self.path(QUERIES)).with_context(|| format!("missing input {QUERIES}"))
    }

    fn info(&self) -> Result<CorpusInfo> {
        self.read_json(CORPUS_INFO)
    }

    fn halves(&self) -> Result<Halves> {
        self.read_json(HALVES)
    }

    fn selection(&self) -> Result<SelectionFile> {
        self.read_json(SELECTION)
    }

    fn pack(&self, layer: usize) -> Result<SteeringPack> {
        let rel = pack_path(layer);
        SteeringPack::read(&self.path(&rel)).with_context(|| format!("missing input {rel}"))
    }

    fn probe_config(&self, info: &CorpusInfo) -> ProbeConfig {
        let p = &self.cfg.probe;
        ProbeConfig {
            k: p.k,
            tau: p.tau,
            sampling: SamplingConfig {
                temperature: p.temperature,
                top_p: p.top_p,
                top_k: p.top_k,
                max_new_tokens: p.max_new_tokens,
                seed: self.cfg.seed,
                stop_tokens: info.stop_tokens.clone(),
            },
            matcher: p.matcher,
        }
    }

    fn casal_config(&self) -> CasalTrainConfig {
        let c = &self.cfg.casal;
        CasalTrainConfig {
            lr: c.lr,
            epochs: c.epochs,
            batch_size: (c.batch_size > 0).then_some(c.batch_size),
            seed: self.cfg.seed,
            snapshot_every: Some(c.snapshot_every),
        }
    }
}

pub fn pack_path(layer: usize) -> String {
    format!("{PACK_DIR}/layer_{layer}.pack")
}

fn by_id(queries: &[QueryRecord]) -> HashMap<&str, &QueryRecord> {
    queries.iter().map(|q| (q.id.as_str(), q)).collect()
}

fn pick(index: &HashMap<&str, &QueryRecord>, ids: &[String]) -> Result<Vec<QueryRecord>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|q| (*q).clone())
                .ok_or_else(|| anyhow!("query {id} not found"))
        })
        .collect()
}

fn eval_set(info: &CorpusInfo, queries: &[QueryRecord], known: &[String], unknown: &[String], max_new: usize) -> Result<EvalSet> {
    let index = by_id(queries);
    Ok(EvalSet {
        known: pick(&index, known)?,
        unknown: pick(&index, unknown)?,
        abstain_token: info.abstain_token,
        stop_tokens: info.stop_tokens.clone(),
        max_new_tokens: max_new,
    })
}

/// Splits known and unknown ids into train / held-out halves by hash and
/// caps the training rows at `budget`.
pub fn make_halves(known: &[String], unknown: &[String], tau: usize, seed: u64, budget: usize) -> Halves {
    let (mut train_known, eval_known) = hash_halves(known, seed);
    let (mut train_unknown, eval_unknown) = hash_halves(unknown, seed);
    if train_known.len() + train_unknown.len() > budget {
        let half = budget / 2;
        let k = train_known.len().min(half.max(budget.saturating_sub(train_unknown.len())));
        train_known.truncate(k);
        train_unknown.truncate(budget - k);
    }
    Halves {
        tau,
        train_known,
        train_unknown,
        eval_known,
        eval_unknown,
    }
}

/// Silhouette of held-out `a^{layer}` rows, known vs unknown.
pub fn heldout_silhouette(w: &TransformerWeights, mc: &ModelConfig, eval: &EvalSet, layer: usize) -> Result<Option<f64>> {
    let qs: Vec<&QueryRecord> = eval.known.iter().chain(&eval.unknown).collect();
    let acts = extract_many(w, mc, &qs, &[(layer, StreamPoint::PostLayer)])?.remove(0);
    let labels: Vec<bool> = (0..qs.len()).map(|i| i < eval.known.len()).collect();
    Ok(silhouette(&acts.rows, &labels).ok())
}

fn completion_lines(eval: &EvalSet, out: &EvalOutput) -> Result<String> {
    let matcher = eval.matcher();
    let mut s = String::new();
    for (q, c) in eval.known.iter().zip(&out.known).chain(eval.unknown.iter().zip(&out.unknown)) {
        let rec = CompletionRecord {
            id: q.id.clone(),
            completion: c.clone(),
            matched_abstain: matcher.matches(c),
            correct: c.tokens == q.answer_tokens,
        };
        s.push_str(&serde_json::to_string(&rec)?);
        s.push('\n');
    }
    Ok(s)
}

/// On an MoE model a plain part name (`down`, `up`, ...) means that part of
/// every expert.
fn submodule(cfg: &RunConfig, mc: &ModelConfig) -> Result<Submodule> {
    let name = &cfg.casal.submodule;
    let n_experts = mc.moe.map(|m| m.n_experts);
    let name = match n_experts {
        Some(_) if !name.starts_with("moe_experts_") => format!("moe_experts_{name}"),
        _ => name.clone(),
    };
    Ok(Submodule::parse(&name, n_experts)?)
}

fn make_pack(
    w: &TransformerWeights,
    mc: &ModelConfig,
    queries: &[QueryRecord],
    known: &[String],
    unknown: &[String],
    layers: &[usize],
    alpha: f64,
) -> Result<Vec<SteeringPack>> {
    let index = by_id(queries);
    let rows = pick(&index, known)?.into_iter().chain(pick(&index, unknown)?).collect::<Vec<_>>();
    let refs: Vec<&QueryRecord> = rows.iter().collect();
    let taps: Vec<(usize, StreamPoint)> = layers.iter().map(|&l| (l, StreamPoint::PostLayer)).collect();
    let split_hash = sha256_hex(serde_json::to_string(&(known, unknown))?.as_bytes());
    extract_many(w, mc, &refs, &taps)?
        .into_iter()
        .map(|acts| {
            let mut pack = compute_steering_pack(&acts.select(known)?, &acts.select(unknown)?, alpha, acts.layer_index)?;
            pack.train_known_ids = known.to_vec();
            pack.train_unknown_ids = unknown.to_vec();
            pack.split_hash = split_hash.clone();
            Ok(pack)
        })
        .collect()
}

/// CASAL on one pack and training split; returns the report and the
/// substituted model.
fn casal_once(
    cfg: &RunConfig,
    w: &TransformerWeights,
    mc: &ModelConfig,
    queries: &[QueryRecord],
    known: &[String],
    unknown: &[String],
    pack: &SteeringPack,
    train_cfg: &CasalTrainConfig,
) -> Result<(TrainBatchCache, TrainReport)> {
    let cache = build_cache(w, mc, queries, known, unknown, pack, pack.layer)?;
    let sub = CasalSubnetwork::new(w, mc, pack.layer, submodule(cfg, mc)?)?;
    let report = if sub.is_moe() {
        train_moe(&sub, &cache, train_cfg)?
    } else {
        train(&sub, &cache, train_cfg)?
    };
    Ok((cache, report))
}

fn stage_corpus(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let mut out = Vec::new();
    let (queries, info) = match &cfg.corpus.queries {
        Some(path) => {
            let qs = load_qa_records(path).with_context(|| format!("reading {}", path.display()))?;
            let abstain = cfg.corpus.world.abstain_token;
            let info = CorpusInfo {
                abstain_token: abstain,
                stop_tokens: vec![cfg.corpus.eos_token, abstain],
                n_queries: qs.len(),
                synthetic: false,
            };
            (qs, info)
        }
        None => {
            let world = generate_fact_world(&cfg.world_spec())?;
            out.push(run.write_json("corpus/world.json", &world.manifest())?);
            let info = CorpusInfo {
                abstain_token: world.vocab.abstain,
                stop_tokens: world.stop_tokens(),
                n_queries: world.queries.len(),
                synthetic: true,
            };
            (world.queries, info)
        }
    };
    write_qa_records(&run.ensure_parent(QUERIES)?, &queries)?;
    out.push(QUERIES.into());
    out.push(run.write_json(CORPUS_INFO, &info)?);
    Ok(out)
}

fn stage_pretrain(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    if let Some(path) = &cfg.pretrain.checkpoint {
        let (mc, w) = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(vec![run.save_ckpt(BASE_CKPT, &w, &mc)?]);
    }
    let info = run.info()?;
    if !info.synthetic {
        bail!("pretraining needs the synthetic corpus");
    }
    let world = generate_fact_world(&cfg.world_spec())?;
    let m = &cfg.model;
    let mc = ModelConfig {
        n_layer: m.n_layer,
        d_model: m.d_model,
        d_attn: m.d_attn,
        n_heads: m.n_heads,
        d_ff: m.d_ff,
        n_ctx: m.n_ctx,
        vocab_size: world.vocab.size,
        moe: m.moe,
        rng_seed: cfg.seed,
    };
    let opts = casal_core::corpus::TrainOptions {
        seed: cfg.seed,
        ..cfg.pretrain.options.clone()
    };
    let (w, trace) = pretrain_toy_model(&mc, &world.stream, &opts)?;
    log::info!("pretrain: val loss {:.4} -> {:.6}", trace.val_loss_initial, trace.val_loss_final);
    let mut csv = String::from("step,loss\n");
    for (s, l) in &trace.loss_trace {
        csv.push_str(&format!("{s},{l:.6}\n"));
    }
    Ok(vec![
        run.save_ckpt(BASE_CKPT, &w, &mc)?,
        run.write_text("metrics/pretrain_loss.csv", &csv)?,
    ])
}

fn stage_probe(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let info = run.info()?;
    let queries = run.queries()?;
    let probe = run.probe_config(&info);
    let result = probe_run(&w, &mc, &queries, &probe, Some(info.abstain_token))?;
    let split = result.split(probe.tau)?;
    log::info!(
        "probe: {} known, {} unknown, {} ambiguous",
        split.known.len(),
        split.unknown.len(),
        split.ambiguous.len()
    );
    let halves = make_halves(&split.known, &split.unknown, probe.tau, cfg.seed, cfg.casal.data_budget);
    let sweep = threshold_sweep(&result, &cfg.probe.taus)?;
    Ok(vec![
        run.write_json(PROBE_RUN, &result)?,
        run.write_json("splits/split.json", &SplitFile { probe, split })?,
        run.write_json(HALVES, &halves)?,
        run.write_text("metrics/threshold_sweep.csv", &sweep_csv(&sweep))?,
    ])
}

fn candidate_layers(cfg: &RunConfig, mc: &ModelConfig) -> Result<Vec<usize>> {
    let mut layers: Vec<usize> = if cfg.steering.layers.is_empty() {
        (0..mc.n_layer).collect()
    } else {
        cfg.steering.layers.clone()
    };
    layers.extend(cfg.steering.layer);
    layers.sort_unstable();
    layers.dedup();
    if let Some(&l) = layers.iter().find(|&&l| l >= mc.n_layer) {
        bail!("layer {l} out of range for {} layers", mc.n_layer);
    }
    Ok(layers)
}

fn stage_steer(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let queries = run.queries()?;
    let h = run.halves()?;
    let layers = candidate_layers(cfg, &mc)?;
    let packs = make_pack(&w, &mc, &queries, &h.train_known, &h.train_unknown, &layers, cfg.steering.alpha)?;
    let mut out = Vec::new();
    for pack in packs {
        let rel = pack_path(pack.layer);
        pack.write(&run.ensure_parent(&rel)?)?;
        out.push(rel);
    }
    Ok(out)
}

fn stage_select(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let file = if let Some(layer) = cfg.steering.layer {
        SelectionFile {
            baseline: None,
            selection: LayerSelection {
                layer,
                alpha: cfg.steering.alpha,
                within_budget: true,
                rows: Vec::new(),
            },
            fixed: true,
        }
    } else {
        let info = run.info()?;
        let queries = run.queries()?;
        let h = run.halves()?;
        let eval = eval_set(&info, &queries, &h.train_known, &h.train_unknown, cfg.eval.max_new_tokens)?;
        let packs = candidate_layers(cfg, &mc)?
            .into_iter()
            .map(|l| run.pack(l))
            .collect::<Result<Vec<_>>>()?;
        let (baseline, selection) = select_layer(
            &w,
            &mc,
            &eval,
            &packs,
            &cfg.steering.select_alphas,
            cfg.steering.positions,
            cfg.steering.accuracy_budget,
        )?;
        log::info!("selected layer {} (within budget: {})", selection.layer, selection.within_budget);
        SelectionFile {
            baseline: Some(baseline),
            selection,
            fixed: false,
        }
    };
    Ok(vec![
        run.write_json(SELECTION, &file)?,
        run.write_text("metrics/layer_sweep.csv", &layer_rows_csv(&file.selection.rows))?,
    ])
}

fn snapshot_path(step: usize) -> String {
    format!("{SNAPSHOT_DIR}/step_{step:04}.ckpt")
}

fn stage_train(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let queries = run.queries()?;
    let h = run.halves()?;
    let layer = run.selection()?.selection.layer;
    let pack = run.pack(layer)?;
    let info = run.info()?;
    let probe_hash = sha256_hex(serde_json::to_string(&run.probe_config(&info))?.as_bytes());
    let (cache, report) = casal_once(cfg, &w, &mc, &queries, &h.train_known, &h.train_unknown, &pack, &run.casal_config())?;
    if let Some(step) = report.diverged_at {
        log::warn!("CASAL training hit a non-finite loss at step {step}");
    }
    let (trained, manifest) = finalize_with_manifest(&w, &mc, &report, &pack, &probe_hash)?;
    let mut out = Vec::new();
    let cache_rel = format!("caches/layer_{layer}.cache");
    cache.write(&run.ensure_parent(&cache_rel)?)?;
    out.push(cache_rel);
    out.push(run.save_ckpt(CASAL_CKPT, &trained, &mc)?);
    if run.path(SNAPSHOT_DIR).exists() {
        std::fs::remove_dir_all(run.path(SNAPSHOT_DIR))?;
    }
    for (step, tensors) in &report.snapshots {
        let snap = substitute_weights(&w, layer, &report.submodule, tensors.clone())?;
        out.push(run.save_ckpt(&snapshot_path(*step), &snap, &mc)?);
    }
    let summary = TrainSummary {
        layer,
        submodule: report.submodule.label(),
        config: report.config,
        rows: cache.len(),
        initial: report.initial,
        epochs: report.epochs.clone(),
        steps: report.steps,
        diverged_at: report.diverged_at,
        silhouette_before: report.silhouette_before,
        silhouette_after: report.silhouette_after,
        snapshot_steps: report.snapshots.iter().map(|(s, _)| *s).collect(),
    };
    out.push(run.write_json("train/report.json", &summary)?);
    out.push(run.write_json("train/manifest.json", &manifest)?);
    Ok(out)
}

fn evaluate_model(
    run: &Run,
    name: &str,
    w: &TransformerWeights,
    mc: &ModelConfig,
    eval: &EvalSet,
    layer: usize,
    steer: Option<ResidualSteer<'_>>,
    out: &mut Vec<String>,
) -> Result<EvalSummary> {
    let result = eval.run(w, mc, steer)?;
    let silhouette = if steer.is_none() {
        heldout_silhouette(w, mc, eval, layer)?
    } else {
        None
    };
    out.push(run.write_text(&format!("completions/{name}.jsonl"), &completion_lines(eval, &result)?)?);
    let summary = EvalSummary {
        name: name.to_string(),
        layer,
        n_known: eval.known.len(),
        n_unknown: eval.unknown.len(),
        behavior: result.behavior,
        silhouette,
    };
    out.push(run.write_json(&format!("metrics/eval_{name}.json"), &summary)?);
    Ok(summary)
}

fn heldout_eval(run: &Run) -> Result<(EvalSet, usize)> {
    let info = run.info()?;
    let queries = run.queries()?;
    let h = run.halves()?;
    let layer = run.selection()?.selection.layer;
    Ok((
        eval_set(&info, &queries, &h.eval_known, &h.eval_unknown, run.cfg.eval.max_new_tokens)?,
        layer,
    ))
}

fn stage_eval(run: &Run) -> Result<Vec<String>> {
    let (eval, layer) = heldout_eval(run)?;
    let (mc, base) = run.load_ckpt(BASE_CKPT)?;
    let (_, casal) = run.load_ckpt(CASAL_CKPT)?;
    let mut out = Vec::new();
    let b = evaluate_model(run, "baseline", &base, &mc, &eval, layer, None, &mut out)?;
    let c = evaluate_model(run, "casal", &casal, &mc, &eval, layer, None, &mut out)?;
    log::info!(
        "held-out hallucination {:.3} -> {:.3}, accuracy {:.3} -> {:.3}",
        b.behavior.halluc_unknown,
        c.behavior.halluc_unknown,
        b.behavior.acc_known,
        c.behavior.acc_known
    );
    let summary: TrainSummary = run.read_json("train/report.json")?;
    let mut rows = Vec::new();
    for step in summary.snapshot_steps {
        let (_, w) = run.load_ckpt(&snapshot_path(step))?;
        let behavior = eval.run(&w, &mc, None)?.behavior;
        let sil = heldout_silhouette(&w, &mc, &eval, layer)?
            .ok_or_else(|| anyhow!("held-out silhouette needs two queries per label"))?;
        rows.push(CheckpointRow {
            step,
            silhouette: sil,
            behavior,
        });
    }
    out.push(run.write_json("metrics/checkpoints.json", &rows)?);
    Ok(out)
}

fn stage_caa(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (eval, layer) = heldout_eval(run)?;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let alpha = cfg.steering.alpha;
    let mut rows = Vec::new();
    for l in candidate_layers(cfg, &mc)? {
        let v = run.pack(l)?.scaled_unknown(alpha);
        let b = eval.run(
            &w,
            &mc,
            Some(ResidualSteer {
                layer: l,
                vector: &v,
                positions: cfg.steering.positions,
            }),
        )?;
        rows.push(LayerRow {
            layer: l,
            alpha,
            halluc_unknown: b.behavior.halluc_unknown,
            acc_known: b.behavior.acc_known,
            refusal_known: b.behavior.refusal_known,
        });
    }
    let mut out = vec![
        run.write_json("metrics/caa_layers.json", &rows)?,
        run.write_text("metrics/caa_layers.csv", &layer_rows_csv(&rows))?,
    ];
    let v = run.pack(layer)?.scaled_unknown(alpha);
    let steer = ResidualSteer {
        layer,
        vector: &v,
        positions: cfg.steering.positions,
    };
    evaluate_model(run, "caa", &w, &mc, &eval, layer, Some(steer), &mut out)?;
    Ok(out)
}

fn stage_sft(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (eval, layer) = heldout_eval(run)?;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let info = run.info()?;
    let queries = run.queries()?;
    let index = by_id(&queries);
    let h = run.halves()?;
    let refusal = vec![info.abstain_token, info.stop_tokens[0]];
    let mut pairs = Vec::new();
    for q in pick(&index, &h.train_known)? {
        pairs.push(SftPair {
            prompt: q.prompt_tokens,
            target: q.answer_tokens,
        });
    }
    for q in pick(&index, &h.train_unknown)? {
        pairs.push(SftPair {
            prompt: q.prompt_tokens,
            target: refusal.clone(),
        });
    }
    let opts = casal_core::corpus::TrainOptions {
        seed: cfg.seed,
        ..cfg.baselines.sft_options.clone()
    };
    let (tuned, _) = sft_finetune(&w, &mc, &pairs, &opts)?;
    let mut out = vec![run.save_ckpt(SFT_CKPT, &tuned, &mc)?];
    evaluate_model(run, "sft", &tuned, &mc, &eval, layer, None, &mut out)?;
    Ok(out)
}

fn stage_sweep(run: &Run) -> Result<Vec<String>> {
    let cfg = run.cfg;
    let (mc, w) = run.load_ckpt(BASE_CKPT)?;
    let info = run.info()?;
    let queries = run.queries()?;
    let probe: ProbeRun = run.read_json(PROBE_RUN)?;
    let layer = run.selection()?.selection.layer;
    let train_cfg = CasalTrainConfig {
        snapshot_every: None,
        ..run.casal_config()
    };
    let max_new = cfg.eval.max_new_tokens;
    let mut tau_rows = Vec::new();
    for &tau in &cfg.probe.taus {
        let split = probe.split(tau)?;
        let h = make_halves(&split.known, &split.unknown, tau, cfg.seed, cfg.casal.data_budget);
        let eval = eval_set(&info, &queries, &h.eval_known, &h.eval_unknown, max_new)?;
        let pack = make_pack(&w, &mc, &queries, &h.train_known, &h.train_unknown, &[layer], cfg.steering.alpha)?.remove(0);
        let (_, report) = casal_once(cfg, &w, &mc, &queries, &h.train_known, &h.train_unknown, &pack, &train_cfg)?;
        let trained = substitute_weights(&w, layer, &report.submodule, report.final_tensors)?;
        let baseline = eval.run(&w, &mc, None)?.behavior;
        let casal = eval.run(&trained, &mc, None)?.behavior;
        tau_rows.push(TauRow {
            tau,
            layer,
            n_known: split.known.len(),
            n_unknown: split.unknown.len(),
            baseline,
            casal,
            relative_reduction: relative_reduction(baseline.halluc_unknown, casal.halluc_unknown),
        });
    }
    let h = run.halves()?;
    let eval = eval_set(&info, &queries, &h.eval_known, &h.eval_unknown, max_new)?;
    let mut budget_rows = Vec::new();
    for &f in &cfg.casal.budget_fractions {
        let take = |ids: &[String]| ids[..((ids.len() as f64 * f).ceil() as usize).clamp(2.min(ids.len()), ids.len())].to_vec();
        let (k, u) = (take(&h.train_known), take(&h.train_unknown));
        let pack = make_pack(&w, &mc, &queries, &k, &u, &[layer], cfg.steering.alpha)?.remove(0);
        let (_, report) = casal_once(cfg, &w, &mc, &queries, &k, &u, &pack, &train_cfg)?;
        let trained = substitute_weights(&w, layer, &report.submodule, report.final_tensors)?;
        budget_rows.push(BudgetRow {
            fraction: f,
            rows: k.len() + u.len(),
            behavior: eval.run(&trained, &mc, None)?.behavior,
        });
    }
    Ok(vec![
        run.write_json("metrics/tau_robustness.json", &tau_rows)?,
        run.write_json("metrics/data_budget.json", &budget_rows)?,
    ])
}

fn optional_json<T: DeserializeOwned>(run: &Run, rel: &str) -> Result<Option<T>> {
    if run.path(rel).exists() {
        run.read_json(rel).map(Some)
    } else {
        Ok(None)
    }
}

fn stage_report(run: &Run) -> Result<Vec<String>> {
    let base: EvalSummary = run.read_json("metrics/eval_baseline.json")?;
    let casal: EvalSummary = run.read_json("metrics/eval_casal.json")?;
    let caa: Option<EvalSummary> = optional_json(run, "metrics/eval_caa.json")?;
    let sft: Option<EvalSummary> = optional_json(run, "metrics/eval_sft.json")?;
    let mut out = Vec::new();

    let rows: Vec<MetricsRow> = [Some(&base), Some(&casal), caa.as_ref(), sft.as_ref()]
        .into_iter()
        .flatten()
        .map(|e| MetricsRow {
            run_id: e.name.clone(),
            split: "heldout".into(),
            n_known: e.n_known,
            n_unknown: e.n_unknown,
            halluc: e.behavior.halluc_unknown,
            refusal: e.behavior.refusal_known,
            acc: e.behavior.acc_known,
            silhouette: e.silhouette,
        })
        .collect();
    out.push(run.write_text("metrics/metrics.csv", &metrics_csv(&rows))?);

    let checkpoints: Option<Vec<CheckpointRow>> = optional_json(run, "metrics/checkpoints.json")?;
    let mut rho = None;
    if let Some(cps) = &checkpoints {
        let mut csv = String::from("step,silhouette,halluc,acc,refusal\n");
        for c in cps {
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                c.step, c.silhouette, c.behavior.halluc_unknown, c.behavior.acc_known, c.behavior.refusal_known
            ));
        }
        out.push(run.write_text("report/silhouette_vs_halluc.csv", &csv)?);
        if cps.len() >= 2 {
            let s: Vec<f64> = cps.iter().map(|c| c.silhouette).collect();
            let h: Vec<f64> = cps.iter().map(|c| c.behavior.halluc_unknown).collect();
            rho = Some(spearman(&s, &h)?);
        }
    }
    if let Some(sel) = optional_json::<SelectionFile>(run, SELECTION)? {
        out.push(run.write_text("report/layer_sweep.csv", &layer_rows_csv(&sel.selection.rows))?);
    }
    if let Some(rows) = optional_json::<Vec<LayerRow>>(run, "metrics/caa_layers.json")? {
        out.push(run.write_text("report/caa_layers.csv", &layer_rows_csv(&rows))?);
    }
    if let Some(rows) = optional_json::<Vec<TauRow>>(run, "metrics/tau_robustness.json")? {
        let mut csv = String::from("tau,layer,n_known,n_unknown,baseline_halluc,casal_halluc,relative_reduction,baseline_acc,casal_acc,baseline_refusal,casal_refusal\n");
        for r in rows {
            csv.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.tau,
                r.layer,
                r.n_known,
                r.n_unknown,
                r.baseline.halluc_unknown,
                r.casal.halluc_unknown,
                r.relative_reduction,
                r.baseline.acc_known,
                r.casal.acc_known,
                r.baseline.refusal_known,
                r.casal.refusal_known
            ));
        }
        out.push(run.write_text("report/tau_sweep.csv", &csv)?);
    }
    if let Some(rows) = optional_json::<Vec<BudgetRow>>(run, "metrics/data_budget.json")? {
        let mut csv = String::from("fraction,rows,halluc,acc,refusal\n");
        for r in rows {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.fraction, r.rows, r.behavior.halluc_unknown, r.behavior.acc_known, r.behavior.refusal_known
            ));
        }
        out.push(run.write_text("report/training_size.csv", &csv)?);
    }
    let summary = Summary {
        layer: casal.layer,
        baseline: base.behavior,
        casal: casal.behavior,
        caa: caa.map(|e| e.behavior),
        sft: sft.map(|e| e.behavior),
        relative_reduction: relative_reduction(base.behavior.halluc_unknown, casal.behavior.halluc_unknown),
        silhouette_before: base.silhouette,
        silhouette_after: casal.silhouette,
        checkpoint_spearman: rho,
    };
    out.push(run.write_json("report/summary.json", &summary)?);
    Ok(out)
}

fn stage_flops(run: &Run) -> Result<Vec<String>> {
    let f = &run.cfg.flops;
    let report = flops::report(
        &f.spec,
        ForwardTerms {
            context: f.context,
            embeddings: false,
        },
    )?;
    Ok(vec![
        run.write_json("flops/ledger.json", &report)?,
        run.write_text("flops/ledger.csv", &report.to_csv())?,
    ])
}

/// Files (or directories) each stage reads.
fn stage_inputs(stage: &str) -> &'static [&'static str] {
    match stage {
        "corpus" | "flops" => &[],
        "pretrain" => &[CORPUS_INFO],
        "probe" => &[BASE_CKPT, QUERIES, CORPUS_INFO],
        "steer" => &[BASE_CKPT, QUERIES, HALVES],
        "select" => &[BASE_CKPT, QUERIES, CORPUS_INFO, HALVES, PACK_DIR],
        "train" => &[BASE_CKPT, QUERIES, CORPUS_INFO, HALVES, SELECTION, PACK_DIR],
        "eval" => &[BASE_CKPT, CASAL_CKPT, SNAPSHOT_DIR, QUERIES, CORPUS_INFO, HALVES, SELECTION, "train/report.json"],
        "caa" => &[BASE_CKPT, QUERIES, CORPUS_INFO, HALVES, SELECTION, PACK_DIR],
        "sft" => &[BASE_CKPT, QUERIES, CORPUS_INFO, HALVES, SELECTION],
        "sweep" => &[BASE_CKPT, QUERIES, CORPUS_INFO, PROBE_RUN, HALVES, SELECTION],
        "report" => &["metrics", SELECTION],
        _ => &[],
    }
}

fn run_stage(run: &Run, stage: &str) -> Result<Vec<String>> {
    match stage {
        "corpus" => stage_corpus(run),
        "pretrain" => stage_pretrain(run),
        "probe" => stage_probe(run),
        "steer" => stage_steer(run),
        "select" => stage_select(run),
        "train" => stage_train(run),
        "eval" => stage_eval(run),
        "caa" => stage_caa(run),
        "sft" => stage_sft(run),
        "sweep" => stage_sweep(run),
        "report" => stage_report(run),
        "flops" => stage_flops(run),
        other => bail!("unknown stage {other}"),
    }
}

/// Hash of the configuration with run-location fields blanked, so identical
/// experiments hash identically wherever they are written.
pub fn config_snapshot(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        out: PathBuf::from("."),
        stages: Vec::new(),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

fn inputs_for(run: &Run, stage: &str, config_hash: &str) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), config_hash.to_string());
    for rel in stage_inputs(stage) {
        let p = run.path(rel);
        if !p.exists() {
            if stage == "report" || *rel == SNAPSHOT_DIR {
                continue;
            }
            bail!("stage {stage}: missing input {rel}");
        }
        inputs.extend(hash_tree(&run.dir, &p)?);
    }
    if stage == "report" {
        // the report's own outputs live under metrics/ too
        inputs.remove("metrics/metrics.csv");
    }
    Ok(inputs)
}

fn up_to_date(run: &Run, record: &StageRecord, inputs: &BTreeMap<String, String>) -> Result<bool> {
    if &record.inputs != inputs {
        return Ok(false);
    }
    for (rel, hash) in &record.outputs {
        let p = run.path(rel);
        if !p.is_file() || &sha256_file(&p)? != hash {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Executes the configured stages in order into `cfg.out`.
pub fn run(cfg: &RunConfig, env_overrides: &[(String, String)], resume: bool) -> Result<RunOutcome> {
    let dir = cfg.out.clone();
    if dir.exists() && !resume && std::fs::read_dir(&dir)?.next().is_some() {
        bail!("output directory {} is not empty (use --resume)", dir.display());
    }
    std::fs::create_dir_all(&dir)?;
    let run = Run { cfg, dir: dir.clone() };
    let snapshot = config_snapshot(cfg);
    let config_hash = sha256_hex(serde_json::to_string(&snapshot)?.as_bytes());
    let mut manifest = RunManifest::read(&dir)?.unwrap_or_default();
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config_hash = config_hash.clone();
    manifest.config = serde_json::to_value(&snapshot)?;
    manifest.env_overrides = env_overrides.to_vec();
    run.write_text("config.toml", &toml::to_string(&snapshot)?)?;
    manifest.write(&dir)?;

    let mut outcome = RunOutcome {
        dir: dir.clone(),
        ran: Vec::new(),
        skipped: Vec::new(),
    };
    for &stage in ALL_STAGES {
        if !cfg.stage_enabled(stage) {
            continue;
        }
        let inputs = inputs_for(&run, stage, &config_hash)?;
        if resume {
            if let Some(rec) = manifest.stages.get(stage) {
                if up_to_date(&run, rec, &inputs)? {
                    log::info!("stage {stage}: up to date");
                    outcome.skipped.push(stage.to_string());
                    continue;
                }
            }
        }
        log::info!("stage {stage}: running");
        let start = Instant::now();
        let result = run_stage(&run, stage);
        let written = match result {
            Ok(w) => w,
            Err(e) => {
                manifest.refresh_artifacts(&dir)?;
                manifest.write(&dir)?;
                return Err(e.context(format!("stage {stage} failed")));
            }
        };
        let mut outputs = BTreeMap::new();
        for rel in written {
            outputs.insert(rel.clone(), sha256_file(&run.path(&rel))?);
        }
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                inputs,
                outputs,
                seconds: start.elapsed().as_secs_f64(),
            },
        );
        manifest.refresh_artifacts(&dir)?;
        manifest.write(&dir)?;
        outcome.ran.push(stage.to_string());
    }
    manifest.refresh_artifacts(&dir)?;
    manifest.write(&dir)?;
    Ok(outcome)
}

/// Runs a single stage against an existing run directory.
pub fn run_single(cfg: &RunConfig, stage: &str, env_overrides: &[(String, String)]) -> Result<RunOutcome> {
    let cfg = RunConfig {
        stages: vec![stage.to_string()],
        ..cfg.clone()
    };
    run(&cfg, env_overrides, true)
}

pub fn load_summary(dir: &Path) -> Result<Summary> {
    let p = dir.join("report/summary.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("missing {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}
