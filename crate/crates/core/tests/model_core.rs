use casal_core::model::*;
use casal_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(moe: Option<MoeConfig>) -> ModelConfig {
    ModelConfig {
        n_layer: 4,
        d_model: 12,
        d_attn: 8,
        n_heads: 2,
        d_ff: 16,
        n_ctx: 10,
        vocab_size: 23,
        moe,
        rng_seed: 0,
    }
}

// ---- straight-line reference forward, written without matrices ----

fn mv(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
        .collect()
}

fn rms(x: &[f64], g: &Matrix) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().enumerate().map(|(i, v)| v / s * g.get(0, i)).collect()
}

fn swiglu(x: &[f64], f: &DenseFfn) -> Vec<f64> {
    let g = mv(x, &f.w_gate);
    let u = mv(x, &f.w_up);
    let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
    mv(&h, &f.w_down)
}

fn reference_residuals(w: &TransformerWeights, cfg: &ModelConfig, toks: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let t = toks.len();
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|p| {
            (0..cfg.d_model)
                .map(|i| w.tok_emb.get(toks[p] as usize, i) + w.pos_emb.get(p, i))
                .collect()
        })
        .collect();
    let hd = cfg.d_attn / cfg.n_heads;
    let mut per_layer = Vec::new();
    for layer in &w.layers {
        let xn: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &layer.attn_norm)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|r| mv(r, &layer.wq)).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|r| mv(r, &layer.wk)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|r| mv(r, &layer.wv)).collect();
        for i in 0..t {
            let mut heads = vec![0.0; cfg.d_attn];
            for h in 0..cfg.n_heads {
                let r = h * hd..(h + 1) * hd;
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
                for j in 0..=i {
                    let p = (s[j] - m).exp() / z;
                    for c in r.clone() {
                        heads[c] += p * v[j][c];
                    }
                }
            }
            let o = mv(&heads, &layer.wo);
            for (a, b) in x[i].iter_mut().zip(o) {
                *a += b;
            }
        }
        for row in x.iter_mut() {
            let h = rms(row, &layer.ffn_norm);
            let y = match &layer.ffn {
                FeedForward::Dense(f) => swiglu(&h, f),
                FeedForward::Moe { .. } => unreachable!("dense oracle"),
            };
            for (a, b) in row.iter_mut().zip(y) {
                *a += b;
            }
        }
        per_layer.push(x.clone());
    }
    per_layer
}

#[test]
fn forward_matches_reference_oracle() {
    let cfg = ModelConfig {
        n_layer: 3,
        vocab_size: 30,
        ..small_config(None)
    };
    let w = TransformerWeights::init_with(&cfg, InitScales { tok_emb: 1.0, pos_emb: 0.5 }).unwrap();
    let toks = [3u32, 7, 1, 29, 0, 4, 4, 12];
    let tap = ActivationTap {
        layer_index: 1,
        position_policy: PositionPolicy::AllTokens,
        stream_point: StreamPoint::PostLayer,
    };
    let out = forward(&w, &cfg, &toks, &[tap]).unwrap();
    let reference = reference_residuals(&w, &cfg, &toks);
    let act = out.activation(&tap).unwrap();
    assert_eq!(act.shape(), [8, cfg.d_model]);
    for p in 0..8 {
        for i in 0..cfg.d_model {
            assert!((act.get(p, i) - reference[1][p][i]).abs() < 1e-12);
        }
    }
    // logits from the final residual
    for p in 0..8 {
        let y = mv(&rms(&reference[2][p], &w.final_norm), &w.unembed);
        for (i, v) in y.iter().enumerate() {
            assert!((out.logits.get(p, i) - v).abs() < 1e-11);
        }
    }
    assert_eq!(out.logits.shape(), [8, cfg.vocab_size]);
}

#[test]
fn zero_weights_give_zero_logits_and_embedding_taps() {
    let cfg = small_config(None);
    let w = TransformerWeights::zeros(&cfg).unwrap();
    let taps: Vec<ActivationTap> = (0..cfg.n_layer)
        .flat_map(|l| {
            [StreamPoint::PreLayer, StreamPoint::PostLayer].map(|s| ActivationTap {
                layer_index: l,
                position_policy: PositionPolicy::AllTokens,
                stream_point: s,
            })
        })
        .collect();
    let out = forward(&w, &cfg, &[1, 2, 3], &taps).unwrap();
    assert!(out.logits.as_slice().iter().all(|&v| v == 0.0));
    for (_, a) in &out.activations {
        assert!(a.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(a.cols(), cfg.d_model);
    }
}

#[test]
fn forward_is_deterministic_and_validates_inputs() {
    let cfg = small_config(Some(MoeConfig { n_experts: 3, top_k: 2 }));
    let w = TransformerWeights::init(&cfg).unwrap();
    let tap = ActivationTap::last(2, StreamPoint::PostLayer);
    let a = forward(&w, &cfg, &[1, 5, 9], &[tap]).unwrap();
    let b = forward(&w, &cfg, &[1, 5, 9], &[tap]).unwrap();
    assert!(a.logits.bit_eq(&b.logits));
    assert!(a.activations[0].1.bit_eq(&b.activations[0].1));
    assert_eq!(a.activations[0].1.shape(), [1, cfg.d_model]);

    assert!(forward(&w, &cfg, &[1, 99], &[]).is_err());
    assert!(forward(&w, &cfg, &[0; 11], &[]).is_err());
    assert!(forward(&w, &cfg, &[], &[]).is_err());
    assert!(forward(&w, &cfg, &[1], &[ActivationTap::last(4, StreamPoint::PreLayer)]).is_err());
    assert!(forward(&w, &cfg, &[1], &[ActivationTap::last(1, StreamPoint::FfIntermediate)]).is_err());
    let other = small_config(None);
    assert!(forward(&w, &ModelConfig { vocab_size: 24, ..other }, &[1], &[]).is_err());

    let assignments = expert_assignments(&w, &cfg, &[1, 5, 9]).unwrap();
    for layer in assignments {
        assert_eq!(layer.len(), 3);
        assert!(layer.iter().all(|sel| sel.len() == 2));
    }
}

// ---- sampling ----

#[test]
fn greedy_and_top1_decoding_match_argmax() {
    let cfg = small_config(None);
    let w = TransformerWeights::init_with(&cfg, InitScales { tok_emb: 1.0, pos_emb: 0.5 }).unwrap();
    let prompt = [2u32, 4, 6];
    let mut manual = prompt.to_vec();
    for _ in 0..5 {
        let logits = next_token_logits(&w, &cfg, &manual, None).unwrap();
        let best = (0..logits.len())
            .fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        manual.push(best as u32);
    }
    let greedy = sample_completion(&w, &cfg, &prompt, &SamplingConfig::greedy(5)).unwrap();
    assert_eq!(greedy, manual[3..].to_vec());
    for seed in 0..3 {
        let top1 = SamplingConfig {
            temperature: 3.0,
            top_p: 0.9,
            top_k: 1,
            max_new_tokens: 5,
            seed,
            stop_tokens: vec![],
        };
        assert_eq!(sample_completion(&w, &cfg, &prompt, &top1).unwrap(), greedy);
    }
    let stop = SamplingConfig {
        stop_tokens: vec![greedy[1]],
        ..SamplingConfig::greedy(5)
    };
    assert_eq!(sample_completion(&w, &cfg, &prompt, &stop).unwrap(), greedy[..2].to_vec());
}

#[test]
fn sampling_is_seeded() {
    let cfg = small_config(None);
    let w = TransformerWeights::init_with(&cfg, InitScales { tok_emb: 1.0, pos_emb: 0.5 }).unwrap();
    let s = SamplingConfig {
        temperature: 1.0,
        top_p: 1.0,
        top_k: 0,
        max_new_tokens: 6,
        seed: 11,
        stop_tokens: vec![],
    };
    let a = sample_completion(&w, &cfg, &[1], &s).unwrap();
    assert_eq!(a, sample_completion(&w, &cfg, &[1], &s).unwrap());
    let outs: std::collections::BTreeSet<Vec<u32>> = (0..8)
        .map(|seed| sample_completion(&w, &cfg, &[1], &SamplingConfig { seed, ..s.clone() }).unwrap())
        .collect();
    assert!(outs.len() > 1);
}

/// Exact distribution after temperature, top-k and nucleus truncation,
/// computed by sorting the full softmax.
fn oracle_distribution(logits: &[f64], t: f64, p: f64, k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i] / t).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut cum = 0.0;
    let mut out = vec![0.0; logits.len()];
    let mut kept = Vec::new();
    for (&i, wi) in idx.iter().zip(&w) {
        kept.push((i, wi / z));
        cum += wi / z;
        if cum >= p {
            break;
        }
    }
    let zk: f64 = kept.iter().map(|(_, q)| q).sum();
    for (i, q) in kept {
        out[i] = q / zk;
    }
    out
}

#[test]
fn sampled_frequencies_match_truncated_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let cfg = SamplingConfig {
        temperature: 0.7,
        top_p: 0.8,
        top_k: 20,
        max_new_tokens: 1,
        seed: 0,
        stop_tokens: vec![],
    };
    let expect = oracle_distribution(&logits, 0.7, 0.8, 20);
    let n = 100_000usize;
    let mut counts = vec![0usize; logits.len()];
    let mut draw_rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..n {
        let t = sampling::sample_token(&logits, &cfg, &mut draw_rng).unwrap();
        counts[t as usize] += 1;
    }
    for (i, (&c, &q)) in counts.iter().zip(&expect).enumerate() {
        if q == 0.0 {
            assert_eq!(c, 0, "token {i} outside the truncated support was drawn");
            continue;
        }
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        assert!(
            (c as f64 - n as f64 * q).abs() <= 3.0 * sigma,
            "token {i}: count {c}, expected {:.1} ± {:.1}",
            n as f64 * q,
            3.0 * sigma
        );
    }
}

// ---- substitution ----

fn all_taps(cfg: &ModelConfig) -> Vec<ActivationTap> {
    (0..cfg.n_layer)
        .map(|l| ActivationTap {
            layer_index: l,
            position_policy: PositionPolicy::AllTokens,
            stream_point: StreamPoint::PostLayer,
        })
        .collect()
}

#[test]
fn identity_substitution_is_bit_exact() {
    let cfg = small_config(None);
    let w = TransformerWeights::init(&cfg).unwrap();
    for sub in [Submodule::Down, Submodule::Up, Submodule::UpAndDown] {
        let orig = extract_submodule(&w, 2, &sub).unwrap();
        let w2 = substitute_weights(&w, 2, &sub, orig).unwrap();
        let a = forward(&w, &cfg, &[1, 2, 3, 4], &all_taps(&cfg)).unwrap();
        let b = forward(&w2, &cfg, &[1, 2, 3, 4], &all_taps(&cfg)).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert_eq!(w, w2);
    }
}

#[test]
fn substitution_is_local_to_the_layer() {
    let cfg = small_config(None);
    let w = TransformerWeights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let new_down = Matrix::randn(cfg.d_ff, cfg.d_model, 0.3, &mut rng);
    let w2 = substitute_weights(&w, 2, &Submodule::Down, vec![new_down]).unwrap();
    let taps = all_taps(&cfg);
    let a = forward(&w, &cfg, &[5, 6, 7], &taps).unwrap();
    let b = forward(&w2, &cfg, &[5, 6, 7], &taps).unwrap();
    for l in 0..cfg.n_layer {
        let same = a.activations[l].1.bit_eq(&b.activations[l].1);
        assert_eq!(same, l < 2, "layer {l}");
    }
    let changed: Vec<String> = w
        .named_tensors()
        .into_iter()
        .zip(w2.named_tensors())
        .filter(|((_, x), (_, y))| !x.bit_eq(y))
        .map(|((n, _), _)| n)
        .collect();
    assert_eq!(changed, vec!["layers.2.w_down".to_string()]);
}

#[test]
fn down_projection_change_is_linear_in_cached_intermediate() {
    let cfg = small_config(None);
    let w = TransformerWeights::init(&cfg).unwrap();
    let toks = [4u32, 8, 15, 16];
    let taps = [
        ActivationTap {
            layer_index: 1,
            position_policy: PositionPolicy::AllTokens,
            stream_point: StreamPoint::FfIntermediate,
        },
        ActivationTap {
            layer_index: 1,
            position_policy: PositionPolicy::AllTokens,
            stream_point: StreamPoint::PostLayer,
        },
    ];
    let base = forward(&w, &cfg, &toks, &taps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let delta = Matrix::randn(cfg.d_ff, cfg.d_model, 0.05, &mut rng);
    let mut down = extract_submodule(&w, 1, &Submodule::Down).unwrap().remove(0);
    down.add_assign(&delta);
    let w2 = substitute_weights(&w, 1, &Submodule::Down, vec![down]).unwrap();
    let after = forward(&w2, &cfg, &toks, &taps).unwrap();
    let inter = &base.activations[0].1;
    let expected = inter.matmul(&delta);
    let mut diff = after.activations[1].1.clone();
    diff.sub_assign(&base.activations[1].1);
    assert!(diff.max_abs_diff(&expected) < 1e-12);
    assert!(after.activations[0].1.bit_eq(inter));
}

// ---- checkpoint ----

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for moe in [None, Some(MoeConfig { n_experts: 3, top_k: 2 })] {
        let cfg = ModelConfig {
            rng_seed: 17,
            ..small_config(moe)
        };
        let w = TransformerWeights::init(&cfg).unwrap();
        let path = dir.path().join("w.ckpt");
        let digest = save_checkpoint(&path, &w, &cfg).unwrap();
        assert_eq!(digest, weights_digest(&w, &cfg));
        let (cfg2, w2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for ((na, a), (nb, b)) in w.named_tensors().into_iter().zip(w2.named_tensors()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"CASALWT1");
        assert!(checkpoint::checkpoint_from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}

// ---- gradients ----

fn fd_check(cfg: &ModelConfig, examples: &[LmExample], coords: usize, seed: u64) {
    let w = TransformerWeights::init_with(cfg, InitScales { tok_emb: 0.5, pos_emb: 0.3 }).unwrap();
    let (_, grad) = lm_loss_and_grad(&w, cfg, examples).unwrap();
    let n_tensors = w.named_tensors().len();
    let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut checked = 0;
    while checked < coords {
        let ti = rng.gen_range(0..n_tensors);
        let len = grad.named_tensors()[ti].1.as_slice().len();
        let ci = rng.gen_range(0..len);
        let analytic = grad.named_tensors()[ti].1.as_slice()[ci];
        let eval = |delta: f64| {
            let mut wp = w.clone();
            wp.tensors_mut()[ti].as_mut_slice()[ci] += delta;
            lm_loss(&wp, cfg, examples).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        // coordinates with no influence (e.g. unused embeddings) are exact zeros
        if scale < 1e-9 {
            assert!(analytic.abs() < 1e-9, "{}[{ci}]", names[ti]);
            checked += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / scale.max(1e-4);
        assert!(rel < 1e-5, "{}[{ci}]: analytic {analytic:e} numeric {numeric:e}", names[ti]);
        checked += 1;
    }
}

#[test]
fn dense_gradient_matches_finite_differences() {
    let cfg = small_config(None);
    let examples = [
        LmExample { tokens: vec![1, 4], loss_start: 0 },
        LmExample { tokens: vec![3, 9, 2, 7, 7], loss_start: 1 },
    ];
    fd_check(&cfg, &examples, 150, 1);
}

#[test]
fn moe_gradient_matches_finite_differences() {
    let cfg = small_config(Some(MoeConfig { n_experts: 3, top_k: 2 }));
    let examples = [
        LmExample { tokens: vec![2, 11, 5, 1], loss_start: 0 },
        LmExample { tokens: vec![8, 0, 19], loss_start: 1 },
    ];
    fd_check(&cfg, &examples, 150, 2);
}
