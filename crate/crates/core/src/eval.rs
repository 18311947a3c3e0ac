//! Greedy behavioural evaluation on held-out known / unknown queries.

use serde::{Deserialize, Serialize};

use crate::corpus::QueryRecord;
use crate::error::Result;
use crate::metrics::{accuracy, hallucination_rate, refusal_rate, AbstainMatcher, Completion, MatchMode};
use crate::model::{greedy_completions, ModelConfig, ResidualSteer, TransformerWeights};

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub known: Vec<QueryRecord>,
    pub unknown: Vec<QueryRecord>,
    pub abstain_token: u32,
    pub stop_tokens: Vec<u32>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub halluc_unknown: f64,
    pub acc_known: f64,
    pub refusal_known: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub behavior: Behavior,
    pub known: Vec<Completion>,
    pub unknown: Vec<Completion>,
}

impl EvalSet {
    pub fn matcher(&self) -> AbstainMatcher {
        AbstainMatcher::Token(self.abstain_token)
    }

    pub fn run(
        &self,
        weights: &TransformerWeights,
        config: &ModelConfig,
        steer: Option<ResidualSteer<'_>>,
    ) -> Result<EvalOutput> {
        let prompts: Vec<&[u32]> = self
            .known
            .iter()
            .chain(&self.unknown)
            .map(|q| q.prompt_tokens.as_slice())
            .collect();
        let mut outs: Vec<Completion> =
            greedy_completions(weights, config, &prompts, self.max_new_tokens, &self.stop_tokens, steer)?
                .into_iter()
                .map(Completion::from)
                .collect();
        let unknown = outs.split_off(self.known.len());
        let known = outs;
        let truths: Vec<Completion> = self.known.iter().map(|q| q.answer_tokens.clone().into()).collect();
        let m = self.matcher();
        Ok(EvalOutput {
            behavior: Behavior {
                halluc_unknown: hallucination_rate(&unknown, &m)?,
                acc_known: accuracy(&known, &truths, MatchMode::Token)?,
                refusal_known: refusal_rate(&known, &m)?,
            },
            known,
            unknown,
        })
    }
}
