use casal_core::casal::*;
use casal_core::corpus::{Provenance, QueryRecord};
use casal_core::model::*;
use casal_core::steer::{compute_steering_pack, extract_many, Label, SteeringPack};
use casal_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER: usize = 1;

fn config(moe: Option<MoeConfig>) -> ModelConfig {
    ModelConfig {
        n_layer: 3,
        d_model: 10,
        d_attn: 8,
        n_heads: 2,
        d_ff: 14,
        n_ctx: 8,
        vocab_size: 30,
        moe,
        rng_seed: 3,
    }
}

fn weights(cfg: &ModelConfig) -> TransformerWeights {
    TransformerWeights::init_with(cfg, InitScales { tok_emb: 0.5, pos_emb: 0.3 }).unwrap()
}

fn queries(n: usize, seed: u64) -> Vec<QueryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| QueryRecord {
            id: format!("q{i:02}"),
            prompt_tokens: (0..rng.gen_range(2..6)).map(|_| rng.gen_range(0..30)).collect(),
            answer_tokens: vec![rng.gen_range(0..30)],
            prompt_text: None,
            answer_text: None,
            provenance: Provenance::External,
            group_tag: String::new(),
        })
        .collect()
}

struct Fixture {
    cfg: ModelConfig,
    w: TransformerWeights,
    qs: Vec<QueryRecord>,
    known: Vec<String>,
    unknown: Vec<String>,
}

impl Fixture {
    fn new(moe: Option<MoeConfig>, n: usize) -> Self {
        let cfg = config(moe);
        let w = weights(&cfg);
        let qs = queries(n, 17);
        let ids: Vec<String> = qs.iter().map(|q| q.id.clone()).collect();
        let (known, unknown) = ids.split_at(n / 2);
        Self {
            cfg,
            w,
            qs,
            known: known.to_vec(),
            unknown: unknown.to_vec(),
        }
    }

    fn pack(&self, alpha: f64) -> SteeringPack {
        let refs: Vec<&QueryRecord> = self.qs.iter().collect();
        let acts = extract_many(&self.w, &self.cfg, &refs, &[(LAYER, StreamPoint::PostLayer)])
            .unwrap()
            .remove(0);
        compute_steering_pack(&acts.select(&self.known).unwrap(), &acts.select(&self.unknown).unwrap(), alpha, LAYER)
            .unwrap()
    }

    fn cache(&self, alpha: f64) -> TrainBatchCache {
        build_cache(&self.w, &self.cfg, &self.qs, &self.known, &self.unknown, &self.pack(alpha), LAYER).unwrap()
    }

    fn sub(&self, name: &str) -> CasalSubnetwork {
        let sm = Submodule::parse(name, self.cfg.moe.map(|m| m.n_experts)).unwrap();
        CasalSubnetwork::new(&self.w, &self.cfg, LAYER, sm).unwrap()
    }
}

/// Per-label loss with each row's `a^{L*}` taken from a full-model forward,
/// independent of the training code.
fn loop_loss(w: &TransformerWeights, cfg: &ModelConfig, f: &Fixture, cache: &TrainBatchCache) -> (f64, f64) {
    let index: std::collections::HashMap<&str, &QueryRecord> = f.qs.iter().map(|q| (q.id.as_str(), q)).collect();
    let (mut lu, mut lk, mut nu, mut nk) = (0.0, 0.0, 0, 0);
    for (r, id) in cache.ids.iter().enumerate() {
        let q = index[id.as_str()];
        let out = forward(w, cfg, &q.prompt_tokens, &[ActivationTap::last(LAYER, StreamPoint::PostLayer)]).unwrap();
        let a = out.activation(&ActivationTap::last(LAYER, StreamPoint::PostLayer)).unwrap();
        let d: f64 = a.row(0).iter().zip(cache.targets.row(r)).map(|(x, t)| (t - x) * (t - x)).sum();
        match cache.labels[r] {
            Label::Unknown => {
                lu += d;
                nu += 1
            }
            Label::Known => {
                lk += d;
                nk += 1
            }
        }
    }
    (lu / nu as f64, lk / nk as f64)
}

fn fd_check(sub: &CasalSubnetwork, cache: &TrainBatchCache, coords: usize, seed: u64) {
    let grad = analytic_gradient(sub, cache).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    for _ in 0..coords {
        let ti = rng.gen_range(0..grad.len());
        let ci = rng.gen_range(0..grad[ti].as_slice().len());
        let analytic = grad[ti].as_slice()[ci];
        let eval = |delta: f64| {
            let mut s = sub.clone();
            s.tensors[ti].as_mut_slice()[ci] += delta;
            casal_loss(&s, cache).unwrap().total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(
            (analytic - numeric).abs() / scale < 1e-6,
            "{} tensor {ti}[{ci}]: analytic {analytic:e} numeric {numeric:e}",
            sub.submodule.label()
        );
    }
}

#[test]
fn gradients_match_finite_differences_dense() {
    let f = Fixture::new(None, 12);
    let cache = f.cache(4.0);
    for (i, name) in ["down", "up", "up_and_down"].iter().enumerate() {
        fd_check(&f.sub(name), &cache, 120, i as u64);
    }
}

#[test]
fn gradients_match_finite_differences_moe() {
    let f = Fixture::new(Some(MoeConfig { n_experts: 4, top_k: 2 }), 12);
    let cache = f.cache(4.0);
    for (i, name) in ["moe_experts_down", "moe_experts_up", "moe_experts_up_and_down"].iter().enumerate() {
        fd_check(&f.sub(name), &cache, 120, 10 + i as u64);
    }
}

#[test]
fn zero_alpha_is_a_fixed_point() {
    for moe in [None, Some(MoeConfig { n_experts: 3, top_k: 2 })] {
        let f = Fixture::new(moe, 8);
        let cache = f.cache(0.0);
        assert!(cache.targets.bit_eq(&cache.activations));
        let name = if moe.is_some() { "moe_experts_down" } else { "down" };
        let sub = f.sub(name);
        let loss = casal_loss(&sub, &cache).unwrap();
        assert!(loss.total < 1e-24, "{loss:?}");
        let g = analytic_gradient(&sub, &cache).unwrap();
        assert!(g.iter().all(|m| m.as_slice().iter().all(|v| v.abs() < 1e-12)));
    }
}

#[test]
fn hand_norm_case() {
    let f = Fixture::new(None, 2);
    let mut cache = f.cache(1.0);
    let sub = f.sub("down");
    let pred = predicted_activations(&sub, &cache).unwrap();
    cache.targets = pred.clone();
    let u = cache.labels.iter().position(|&l| l == Label::Unknown).unwrap();
    cache.targets.set(u, 0, pred.get(u, 0) + 3.0);
    cache.targets.set(u, 1, pred.get(u, 1) + 4.0);
    let loss = casal_loss(&sub, &cache).unwrap();
    assert!((loss.unknown - 25.0).abs() < 1e-12, "{loss:?}");
    assert_eq!(loss.known, 0.0);
    assert_eq!(loss.total, loss.unknown + loss.known);
}

#[test]
fn loss_matches_loop_oracle_and_missing_label_errors() {
    let f = Fixture::new(None, 8);
    let cache = f.cache(4.0);
    let loss = casal_loss(&f.sub("up_and_down"), &cache).unwrap();
    let (lu, lk) = loop_loss(&f.w, &f.cfg, &f, &cache);
    assert!((loss.unknown - lu).abs() < 1e-10 * lu.max(1.0));
    assert!((loss.known - lk).abs() < 1e-10 * lk.max(1.0));
    assert_eq!(loss.total, loss.unknown + loss.known);

    let only_known = build_cache(&f.w, &f.cfg, &f.qs, &f.known, &[], &f.pack(4.0), LAYER).unwrap();
    assert!(casal_loss(&f.sub("down"), &only_known).is_err());
}

#[test]
fn cache_rows_match_single_query_extraction_and_round_trip() {
    let f = Fixture::new(None, 6);
    let cache = f.cache(4.0);
    assert_eq!(cache, f.cache(4.0));
    for (r, id) in cache.ids.iter().enumerate() {
        let q = f.qs.iter().find(|q| &q.id == id).unwrap();
        let tap = ActivationTap::last(LAYER, StreamPoint::PostLayer);
        let out = forward(&f.w, &f.cfg, &q.prompt_tokens, &[tap]).unwrap();
        assert_eq!(out.activation(&tap).unwrap().row(0), cache.activations.row(r));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.cache");
    cache.write(&p).unwrap();
    assert_eq!(TrainBatchCache::read(&p).unwrap(), cache);
    assert!(build_cache(&f.w, &f.cfg, &f.qs, &f.known, &f.unknown, &f.pack(4.0), 0).is_err());
}

#[test]
fn one_step_down_update_matches_closed_form() {
    let f = Fixture::new(None, 2);
    let cache = f.cache(4.0);
    let sub = f.sub("down");
    let pred = predicted_activations(&sub, &cache).unwrap();
    let z = cache.intermediates.as_ref().unwrap();
    let lr = 0.01;
    // one row per label, so the mean convention leaves the factor at 2
    let mut expect = sub.tensors[0].clone();
    for r in 0..cache.len() {
        for i in 0..z.cols() {
            for j in 0..pred.cols() {
                let g = 2.0 * z.get(r, i) * (pred.get(r, j) - cache.targets.get(r, j));
                expect.set(i, j, expect.get(i, j) - lr * g);
            }
        }
    }
    let report = train(&sub, &cache, &CasalTrainConfig { lr, epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(report.steps, 1);
    assert!(report.final_tensors[0].max_abs_diff(&expect) < 1e-12);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let f = Fixture::new(None, 8);
    let cache = f.cache(4.0);
    let sub = f.sub("up_and_down");
    let report = train(&sub, &cache, &CasalTrainConfig { lr: 0.0, ..Default::default() }).unwrap();
    assert!(report.final_tensors.iter().zip(&sub.tensors).all(|(a, b)| a.bit_eq(b)));
    assert!(report.epochs.iter().all(|e| e.loss == report.initial));
    let out = finalize(&f.w, &report, &sub.submodule, LAYER).unwrap();
    assert_eq!(weights_digest(&out, &f.cfg), weights_digest(&f.w, &f.cfg));
    assert!(train(&sub, &cache, &CasalTrainConfig { lr: -1.0, ..Default::default() }).is_err());
}

#[test]
fn default_training_decreases_loss_monotonically_and_stays_local() {
    let f = Fixture::new(None, 12);
    let cache = f.cache(4.0);
    let sub = f.sub("down");
    let report = train(&sub, &cache, &CasalTrainConfig::default()).unwrap();
    let mut prev = report.initial.total;
    for e in &report.epochs {
        assert!(e.loss.total <= prev);
        prev = e.loss.total;
    }
    assert!(report.final_loss().total < report.initial.total);

    let out = finalize(&f.w, &report, &sub.submodule, LAYER).unwrap();
    let changed: Vec<String> = f
        .w
        .named_tensors()
        .into_iter()
        .zip(out.named_tensors())
        .filter(|((_, a), (_, b))| !a.bit_eq(b))
        .map(|((n, _), _)| n)
        .collect();
    assert_eq!(changed, [format!("layers.{LAYER}.w_down")]);

    // layers below L* see identical activations
    let refs: Vec<&QueryRecord> = f.qs.iter().collect();
    let taps = [(LAYER - 1, StreamPoint::PostLayer), (LAYER, StreamPoint::PreLayer)];
    let before = extract_many(&f.w, &f.cfg, &refs, &taps).unwrap();
    let after = extract_many(&out, &f.cfg, &refs, &taps).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.rows.bit_eq(&b.rows)));

    // the full model reproduces the subnetwork's final loss
    let (lu, lk) = loop_loss(&out, &f.cfg, &f, &cache);
    assert!((lu + lk - report.final_loss().total).abs() < 1e-10 * lu.max(1.0));
}

#[test]
fn mini_batch_training_is_seeded() {
    let f = Fixture::new(None, 12);
    let cache = f.cache(4.0);
    let sub = f.sub("down");
    let cfg = CasalTrainConfig { batch_size: Some(4), snapshot_every: Some(2), ..Default::default() };
    let a = train(&sub, &cache, &cfg).unwrap();
    let b = train(&sub, &cache, &cfg).unwrap();
    assert_eq!(a.final_tensors, b.final_tensors);
    assert_eq!(a.steps, 9);
    let steps: Vec<usize> = a.snapshots.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, [0, 2, 4, 6, 8, 9]);
}

#[test]
fn single_expert_moe_matches_dense() {
    let moe = Fixture::new(Some(MoeConfig { n_experts: 1, top_k: 1 }), 10);
    let mut dense_w = moe.w.clone();
    for layer in &mut dense_w.layers {
        if let FeedForward::Moe { experts, .. } = &layer.ffn {
            layer.ffn = FeedForward::Dense(experts[0].clone());
        }
    }
    let dense = Fixture {
        cfg: ModelConfig { moe: None, ..moe.cfg.clone() },
        w: dense_w,
        qs: moe.qs.clone(),
        known: moe.known.clone(),
        unknown: moe.unknown.clone(),
    };
    let (cm, cd) = (moe.cache(4.0), dense.cache(4.0));
    assert!(cm.activations.max_abs_diff(&cd.activations) < 1e-10);
    for (m, d) in [("moe_experts_down", "down"), ("moe_experts_up_and_down", "up_and_down")] {
        let (sm, sd) = (moe.sub(m), dense.sub(d));
        let (lm, ld) = (casal_loss(&sm, &cm).unwrap(), casal_loss(&sd, &cd).unwrap());
        assert!((lm.total - ld.total).abs() < 1e-10 * ld.total.max(1.0));
        let cfg = CasalTrainConfig { lr: 1e-2, ..Default::default() };
        let (rm, rd) = (train_moe(&sm, &cm, &cfg).unwrap(), train(&sd, &cd, &cfg).unwrap());
        for (a, b) in rm.final_tensors.iter().zip(&rd.final_tensors) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }
    assert!(train_moe(&dense.sub("down"), &cd, &CasalTrainConfig::default()).is_err());
}

#[test]
fn moe_training_keeps_router_and_routing() {
    let f = Fixture::new(Some(MoeConfig { n_experts: 4, top_k: 2 }), 16);
    let cache = f.cache(4.0);
    let sub = f.sub("moe_experts_up_and_down");
    let report = train_moe(&sub, &cache, &CasalTrainConfig { lr: 1e-2, epochs: 5, ..Default::default() }).unwrap();
    assert!(report.final_loss().total < report.initial.total);
    let out = finalize(&f.w, &report, &sub.submodule, LAYER).unwrap();
    let router = |w: &TransformerWeights| match &w.layers[LAYER].ffn {
        FeedForward::Moe { router, .. } => router.clone(),
        FeedForward::Dense(_) => unreachable!(),
    };
    assert!(router(&f.w).bit_eq(&router(&out)));
    for q in &f.qs {
        let before = expert_assignments(&f.w, &f.cfg, &q.prompt_tokens).unwrap();
        let after = expert_assignments(&out, &f.cfg, &q.prompt_tokens).unwrap();
        // layers up to and including L* route identically
        assert_eq!(before[..=LAYER], after[..=LAYER]);
    }
}

#[test]
fn diverging_training_keeps_last_good_tensors() {
    let f = Fixture::new(None, 8);
    let cache = f.cache(4.0);
    let sub = f.sub("down");
    let report = train(&sub, &cache, &CasalTrainConfig { lr: 1e200, epochs: 4, ..Default::default() }).unwrap();
    assert!(report.diverged_at.is_some());
    assert!(report.final_tensors.iter().all(Matrix::all_finite));
}
