//! Stochastic decoding: temperature, then top-k, then nucleus truncation,
//! then a draw from the renormalized distribution.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::{next_token_logits, run_batch, BatchOptions, ResidualSteer};
use super::weights::TransformerWeights;
use crate::error::{CasalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// `0` selects greedy argmax decoding.
    pub temperature: f64,
    pub top_p: f64,
    /// `0` disables top-k truncation.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Generation stops after emitting any of these.
    #[serde(default)]
    pub stop_tokens: Vec<u32>,
}

impl SamplingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            max_new_tokens,
            seed: 0,
            stop_tokens: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CasalError::InvalidConfig(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CasalError::InvalidConfig(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == 1
    }
}

/// Lowest-id argmax.
pub fn argmax(logits: &[f64]) -> Option<u32> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as u32)
}

/// Candidate tokens and their probabilities after all truncation steps,
/// ordered by descending probability (ties by ascending id).
pub fn truncated_distribution(logits: &[f64], cfg: &SamplingConfig) -> Result<Vec<(u32, f64)>> {
    cfg.validate()?;
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(CasalError::NonFinite("next-token logits".into()));
    }
    if cfg.is_greedy() {
        return argmax(logits)
            .filter(|&t| logits[t as usize].is_finite())
            .map(|t| vec![(t, 1.0)])
            .ok_or(CasalError::EmptyCandidates);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).filter(|&i| scaled[i].is_finite()).collect();
    if order.is_empty() {
        return Err(CasalError::EmptyCandidates);
    }
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    if cfg.top_k > 0 {
        order.truncate(cfg.top_k);
    }
    let max = scaled[order[0]];
    let mut probs: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);

    // smallest prefix whose mass reaches top_p
    let mut keep = 0;
    let mut cum = 0.0;
    for p in &probs {
        keep += 1;
        cum += p;
        if cum >= cfg.top_p {
            break;
        }
    }
    order.truncate(keep);
    probs.truncate(keep);
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) {
        return Err(CasalError::EmptyCandidates);
    }
    Ok(order
        .into_iter()
        .zip(probs)
        .map(|(i, p)| (i as u32, p / z))
        .collect())
}

/// Draws one token from `logits` under `cfg`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> Result<u32> {
    let dist = truncated_distribution(logits, cfg)?;
    if dist.len() == 1 {
        return Ok(dist[0].0);
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(t, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(t);
        }
    }
    Ok(dist.last().expect("non-empty").0)
}

/// Generates up to `max_new_tokens` continuation tokens (the prompt is not
/// included in the result). Deterministic given `sampling.seed`.
pub fn sample_completion(
    weights: &TransformerWeights,
    config: &ModelConfig,
    prompt: &[u32],
    sampling: &SamplingConfig,
) -> Result<Vec<u32>> {
    sample_completion_steered(weights, config, prompt, sampling, None)
}

pub fn sample_completion_steered(
    weights: &TransformerWeights,
    config: &ModelConfig,
    prompt: &[u32],
    sampling: &SamplingConfig,
    steer: Option<ResidualSteer<'_>>,
) -> Result<Vec<u32>> {
    sampling.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(sampling.max_new_tokens);
    for _ in 0..sampling.max_new_tokens {
        if seq.len() >= config.n_ctx {
            break;
        }
        let logits = next_token_logits(weights, config, &seq, steer)?;
        let tok = sample_token(&logits, sampling, &mut rng)?;
        out.push(tok);
        seq.push(tok);
        if sampling.stop_tokens.contains(&tok) {
            break;
        }
    }
    Ok(out)
}

/// Greedy decoding of many prompts at once. Each prompt's completion equals
/// [`sample_completion`] with a greedy config, bit for bit, because every
/// row of the batched forward is computed independently.
pub fn greedy_completions(
    weights: &TransformerWeights,
    config: &ModelConfig,
    prompts: &[&[u32]],
    max_new_tokens: usize,
    stop_tokens: &[u32],
    steer: Option<ResidualSteer<'_>>,
) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut outs = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new_tokens {
        active.retain(|&i| seqs[i].len() < config.n_ctx);
        if active.is_empty() {
            break;
        }
        let batch: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let mut last = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for s in &batch {
            offset += s.len();
            last.push(offset - 1);
        }
        let run = run_batch(
            weights,
            config,
            &batch,
            BatchOptions {
                taps: &[],
                steer,
                keep_cache: false,
                logit_rows: Some(&last),
            },
        )?;
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let logits = run.logits.row(row);
            if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(CasalError::NonFinite("next-token logits".into()));
            }
            let tok = argmax(logits).ok_or(CasalError::EmptyCandidates)?;
            outs[i].push(tok);
            seqs[i].push(tok);
            if !stop_tokens.contains(&tok) {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: f64, p: f64, k: usize) -> SamplingConfig {
        SamplingConfig {
            temperature: t,
            top_p: p,
            top_k: k,
            max_new_tokens: 1,
            seed: 0,
            stop_tokens: vec![],
        }
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let logits = [1.0, 3.0, 3.0, -2.0];
        assert_eq!(truncated_distribution(&logits, &cfg(0.0, 1.0, 0)).unwrap(), vec![(1, 1.0)]);
        assert_eq!(truncated_distribution(&logits, &cfg(5.0, 1.0, 1)).unwrap(), vec![(1, 1.0)]);
    }

    #[test]
    fn truncation_never_grows_support() {
        let logits: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let full = truncated_distribution(&logits, &cfg(1.0, 1.0, 0)).unwrap().len();
        let k = truncated_distribution(&logits, &cfg(1.0, 1.0, 10)).unwrap().len();
        let kp = truncated_distribution(&logits, &cfg(1.0, 0.5, 10)).unwrap().len();
        assert_eq!(full, 30);
        assert_eq!(k, 10);
        assert!(kp <= k && kp >= 1);
    }

    #[test]
    fn rejects_bad_config_and_empty_support() {
        assert!(truncated_distribution(&[0.0], &cfg(1.0, 0.0, 0)).is_err());
        assert!(truncated_distribution(&[0.0], &cfg(-1.0, 1.0, 0)).is_err());
        assert!(matches!(
            truncated_distribution(&[f64::NEG_INFINITY; 3], &cfg(1.0, 0.9, 0)),
            Err(CasalError::EmptyCandidates)
        ));
        assert!(matches!(
            truncated_distribution(&[f64::NAN, 0.0], &cfg(1.0, 0.9, 0)),
            Err(CasalError::NonFinite(_))
        ));
    }
}
