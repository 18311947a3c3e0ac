//! Full-model cross-entropy training: knowledge instillation and the SFT
//! comparison arm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CasalError, Result};
use crate::model::{lm_loss, lm_loss_and_grad, LmExample, ModelConfig, TransformerWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps between loss-trace entries.
    pub log_every: usize,
    /// Leading stream sequences used as the held-in validation slice.
    pub val_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 600,
            batch: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 25,
            val_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// `(step, mini-batch loss)` pairs.
    pub loss_trace: Vec<(usize, f64)>,
    pub val_loss_initial: f64,
    pub val_loss_final: f64,
}

/// Adam state shaped like the model.
struct Adam {
    m: TransformerWeights,
    v: TransformerWeights,
    t: i32,
}

impl Adam {
    fn new(w: &TransformerWeights) -> Self {
        Self {
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut TransformerWeights, grad: &TransformerWeights, o: &TrainOptions) {
        self.t += 1;
        let c1 = 1.0 - o.beta1.powi(self.t);
        let c2 = 1.0 - o.beta2.powi(self.t);
        let named = grad.named_tensors();
        for (((p, m), v), (_, g)) in w
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(named)
        {
            for (((p, m), v), &g) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *m = o.beta1 * *m + (1.0 - o.beta1) * g;
                *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
                *p -= o.lr * (*m / c1) / ((*v / c2).sqrt() + o.eps);
            }
        }
    }
}

/// Adam on mean next-token cross-entropy with uniformly resampled
/// mini-batches. Returns the trained weights and the loss trace.
pub fn train_lm(
    mut weights: TransformerWeights,
    config: &ModelConfig,
    examples: &[LmExample],
    opts: &TrainOptions,
) -> Result<(TransformerWeights, TrainTrace)> {
    if examples.is_empty() {
        return Err(CasalError::InvalidInput("training stream is empty".into()));
    }
    if opts.batch == 0 {
        return Err(CasalError::InvalidConfig("batch must be positive".into()));
    }
    let val = &examples[..opts.val_size.clamp(1, examples.len())];
    let val_loss_initial = lm_loss(&weights, config, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&weights);
    let mut loss_trace = Vec::new();
    let mut batch = Vec::with_capacity(opts.batch);
    for step in 0..opts.steps {
        batch.clear();
        batch.extend((0..opts.batch).map(|_| examples[rng.gen_range(0..examples.len())].clone()));
        let (loss, grad) = lm_loss_and_grad(&weights, config, &batch)?;
        if !loss.is_finite() {
            log::error!("diverged at step {step}; trace so far: {loss_trace:?}");
            return Err(CasalError::Diverged { step });
        }
        if step % opts.log_every.max(1) == 0 || step + 1 == opts.steps {
            log::debug!("step {step} loss {loss:.5}");
            loss_trace.push((step, loss));
        }
        adam.step(&mut weights, &grad, opts);
    }
    let val_loss_final = lm_loss(&weights, config, val)?;
    Ok((
        weights,
        TrainTrace {
            loss_trace,
            val_loss_initial,
            val_loss_final,
        },
    ))
}

/// Instills the stream's facts into a freshly initialized model.
pub fn pretrain_toy_model(
    config: &ModelConfig,
    stream: &[LmExample],
    opts: &TrainOptions,
) -> Result<(TransformerWeights, TrainTrace)> {
    let init = TransformerWeights::init(config)?;
    train_lm(init, config, stream, opts)
}

/// A prompt and the continuation it should be trained to produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

/// Full-model supervised fine-tuning on the target tokens of each pair.
pub fn sft_finetune(
    weights: &TransformerWeights,
    config: &ModelConfig,
    pairs: &[SftPair],
    opts: &TrainOptions,
) -> Result<(TransformerWeights, TrainTrace)> {
    if pairs.is_empty() {
        return Ok((
            weights.clone(),
            TrainTrace {
                loss_trace: Vec::new(),
                val_loss_initial: 0.0,
                val_loss_final: 0.0,
            },
        ));
    }
    let examples: Vec<LmExample> = pairs
        .iter()
        .map(|p| {
            if p.prompt.is_empty() || p.target.is_empty() {
                return Err(CasalError::InvalidInput("SFT pair with empty prompt or target".into()));
            }
            let mut tokens = p.prompt.clone();
            tokens.extend_from_slice(&p.target);
            Ok(LmExample {
                tokens,
                loss_start: p.prompt.len() - 1,
            })
        })
        .collect::<Result<_>>()?;
    train_lm(weights.clone(), config, &examples, opts)
}
