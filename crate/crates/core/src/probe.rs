//! Knowledge-boundary probing: sample `k` completions per query, count the
//! correct ones, and threshold the count into known / unknown / ambiguous.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::derive_seed;
use crate::corpus::QueryRecord;
use crate::error::{CasalError, Result};
use crate::model::sampling::sample_token;
use crate::model::{next_token_logits, ModelConfig, SamplingConfig, TransformerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Completion equals the answer token span.
    ExactToken,
    /// Answer span occurs anywhere inside the completion.
    Substring,
}

impl Matcher {
    pub fn is_correct(self, completion: &[u32], answer: &[u32]) -> bool {
        match self {
            Matcher::ExactToken => completion == answer,
            Matcher::Substring => {
                !answer.is_empty() && completion.windows(answer.len()).any(|w| w == answer)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub k: usize,
    pub tau: usize,
    pub sampling: SamplingConfig,
    pub matcher: Matcher,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 10,
            tau: 7,
            sampling: SamplingConfig {
                temperature: 0.7,
                top_p: 0.8,
                top_k: 20,
                max_new_tokens: 2,
                seed: 0,
                stop_tokens: Vec::new(),
            },
            matcher: Matcher::ExactToken,
        }
    }
}

/// Sample outcome counts for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryScore {
    /// `s(x)`: number of correct samples.
    pub correct: usize,
    /// Samples whose first token is the abstain token.
    pub abstained: usize,
}

/// Raw probing outcome, reusable across thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub k: usize,
    pub scores: BTreeMap<String, QueryScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSplit {
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    pub ambiguous: Vec<String>,
    pub scores: BTreeMap<String, usize>,
    pub k: usize,
    pub tau: usize,
}

/// Rejects thresholds at or below `k/2`, where a query could be both known
/// and unknown.
pub fn check_threshold(k: usize, tau: usize) -> Result<()> {
    if 2 * tau <= k || tau > k {
        return Err(CasalError::ThresholdNotDisjoint { tau, k });
    }
    Ok(())
}

/// Per-sample seed: a pure function of the master seed, the query id and the
/// sample index, so editing the query set never perturbs other queries.
pub fn sample_seed(master: u64, id: &str, j: usize) -> u64 {
    derive_seed(derive_seed(master, id), &j.to_string())
}

/// Draws `k` completions for one query. Sample `j` equals
/// `sample_completion` with seed [`sample_seed`]`(master, id, j)`; logits for
/// repeated prefixes are computed once.
pub fn sample_query(
    weights: &TransformerWeights,
    config: &ModelConfig,
    query: &QueryRecord,
    k: usize,
    sampling: &SamplingConfig,
) -> Result<Vec<Vec<u32>>> {
    sampling.validate()?;
    let mut cache: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(sampling.seed, &query.id, j));
        let mut seq = query.prompt_tokens.clone();
        let mut completion = Vec::new();
        for _ in 0..sampling.max_new_tokens {
            if seq.len() >= config.n_ctx {
                break;
            }
            if !cache.contains_key(&seq) {
                let l = next_token_logits(weights, config, &seq, None)?;
                cache.insert(seq.clone(), l);
            }
            let tok = sample_token(&cache[&seq], sampling, &mut rng)?;
            completion.push(tok);
            seq.push(tok);
            if sampling.stop_tokens.contains(&tok) {
                break;
            }
        }
        out.push(completion);
    }
    Ok(out)
}

/// Samples every query once and records correct / abstain counts.
pub fn probe_run(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[QueryRecord],
    probe: &ProbeConfig,
    abstain_token: Option<u32>,
) -> Result<ProbeRun> {
    if queries.is_empty() {
        return Err(CasalError::InvalidInput("no queries to probe".into()));
    }
    let mut scores = BTreeMap::new();
    for q in queries {
        let samples = sample_query(weights, config, q, probe.k, &probe.sampling)?;
        let correct = samples
            .iter()
            .filter(|c| probe.matcher.is_correct(c, &q.answer_tokens))
            .count();
        let abstained = samples
            .iter()
            .filter(|c| abstain_token.is_some() && c.first().copied() == abstain_token)
            .count();
        if scores.insert(q.id.clone(), QueryScore { correct, abstained }).is_some() {
            return Err(CasalError::DuplicateId {
                id: q.id.clone(),
                line: 0,
            });
        }
    }
    Ok(ProbeRun { k: probe.k, scores })
}

impl ProbeRun {
    /// Thresholds the stored counts; ids come out in ascending order.
    pub fn split(&self, tau: usize) -> Result<KnowledgeSplit> {
        let counts: BTreeMap<String, usize> =
            self.scores.iter().map(|(id, s)| (id.clone(), s.correct)).collect();
        split_from_scores(&counts, self.k, tau)
    }
}

/// `x ∈ D_k ⇔ s(x) ≥ τ`, `x ∈ D_u ⇔ k − s(x) ≥ τ`, everything else ambiguous.
pub fn split_from_scores(scores: &BTreeMap<String, usize>, k: usize, tau: usize) -> Result<KnowledgeSplit> {
    check_threshold(k, tau)?;
    let mut split = KnowledgeSplit {
        known: Vec::new(),
        unknown: Vec::new(),
        ambiguous: Vec::new(),
        scores: scores.clone(),
        k,
        tau,
    };
    for (id, &s) in scores {
        if s > k {
            return Err(CasalError::InvalidInput(format!("score {s} for {id} exceeds k={k}")));
        }
        if s >= tau {
            split.known.push(id.clone());
        } else if k - s >= tau {
            split.unknown.push(id.clone());
        } else {
            split.ambiguous.push(id.clone());
        }
    }
    Ok(split)
}

pub fn probe_knowledge(
    weights: &TransformerWeights,
    config: &ModelConfig,
    queries: &[QueryRecord],
    probe: &ProbeConfig,
) -> Result<KnowledgeSplit> {
    probe_run(weights, config, queries, probe, None)?.split(probe.tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: usize,
    pub n_known: usize,
    pub n_unknown: usize,
    /// Mean fraction of correct samples over D_k.
    pub known_acc: f64,
    /// Mean fraction of non-abstaining samples over D_u.
    pub unknown_halluc: f64,
}

/// Threshold sensitivity table from a single probe pass.
pub fn threshold_sweep(run: &ProbeRun, taus: &[usize]) -> Result<Vec<SweepRow>> {
    let k = run.k as f64;
    taus.iter()
        .map(|&tau| {
            let split = run.split(tau)?;
            let mean = |ids: &[String], f: &dyn Fn(&QueryScore) -> f64| {
                if ids.is_empty() {
                    f64::NAN
                } else {
                    ids.iter().map(|id| f(&run.scores[id])).sum::<f64>() / ids.len() as f64
                }
            };
            Ok(SweepRow {
                tau,
                n_known: split.known.len(),
                n_unknown: split.unknown.len(),
                known_acc: mean(&split.known, &|s| s.correct as f64 / k),
                unknown_halluc: mean(&split.unknown, &|s| 1.0 - s.abstained as f64 / k),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tau,n_known,n_unknown,known_acc,unknown_halluc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.tau, r.n_known, r.n_unknown, r.known_acc, r.unknown_halluc
        ));
    }
    s
}

/// Split file: the probe configuration alongside the split itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub probe: ProbeConfig,
    pub split: KnowledgeSplit,
}

impl SplitFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
