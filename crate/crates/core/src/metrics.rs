//! Behavioural rates over completions and the silhouette score.

use serde::{Deserialize, Serialize};

use crate::error::{CasalError, Result};
use crate::tensor::{sq_dist, Matrix};

/// A generated continuation, as tokens and optionally as text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl From<Vec<u32>> for Completion {
    fn from(tokens: Vec<u32>) -> Self {
        Self { tokens, text: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainMatcher {
    /// The reserved abstain token as the first generated token.
    Token(u32),
    /// Case-insensitive containment of any lexicon entry in the text.
    Substring(Vec<String>),
}

/// Default refusal lexicon for text completions.
pub const REFUSAL_LEXICON: &[&str] = &[
    "i don't know",
    "i do not know",
    "i'm not sure",
    "i am not sure",
    "i cannot answer",
    "i can't answer",
    "i'm unable to",
    "i am unable to",
    "no information",
    "not aware of",
    "i don't have",
    "i do not have",
    "unknown to me",
    "cannot provide",
    "can't provide",
    "not certain",
    "unfortunately",
    "i apologize",
    "i'm sorry",
    "as an ai",
];

impl AbstainMatcher {
    pub fn default_lexicon() -> Self {
        Self::Substring(REFUSAL_LEXICON.iter().map(|s| s.to_string()).collect())
    }

    pub fn matches(&self, c: &Completion) -> bool {
        match self {
            AbstainMatcher::Token(t) => c.tokens.first() == Some(t),
            AbstainMatcher::Substring(lex) => {
                let text = c.text.as_deref().unwrap_or("").to_lowercase();
                lex.iter().any(|l| text.contains(&l.to_lowercase()))
            }
        }
    }
}

fn nonempty(c: &[Completion], what: &str) -> Result<()> {
    if c.is_empty() {
        return Err(CasalError::InvalidInput(format!("{what}: no completions")));
    }
    Ok(())
}

/// Fraction of known-query completions that abstain.
pub fn refusal_rate(completions: &[Completion], matcher: &AbstainMatcher) -> Result<f64> {
    nonempty(completions, "refusal rate")?;
    Ok(completions.iter().filter(|c| matcher.matches(c)).count() as f64 / completions.len() as f64)
}

/// Fraction of unknown-query completions that do not abstain.
pub fn hallucination_rate(completions: &[Completion], matcher: &AbstainMatcher) -> Result<f64> {
    nonempty(completions, "hallucination rate")?;
    Ok(completions.iter().filter(|c| !matcher.matches(c)).count() as f64 / completions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Token sequences equal.
    Token,
    /// Case-insensitive containment of the answer text anywhere.
    Substring,
}

pub fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

pub fn accuracy(completions: &[Completion], truths: &[Completion], mode: MatchMode) -> Result<f64> {
    if completions.len() != truths.len() {
        return Err(CasalError::InvalidInput(format!(
            "{} completions for {} answers",
            completions.len(),
            truths.len()
        )));
    }
    nonempty(completions, "accuracy")?;
    let correct = completions
        .iter()
        .zip(truths)
        .filter(|(c, t)| match mode {
            MatchMode::Token => c.tokens == t.tokens,
            MatchMode::Substring => match (&c.text, &t.text) {
                (Some(c), Some(t)) => contains_ci(c, t),
                _ => false,
            },
        })
        .count();
    Ok(correct as f64 / completions.len() as f64)
}

/// Mean silhouette `(b − a) / max(a, b)` over all points, two clusters,
/// Euclidean distance.
pub fn silhouette(points: &Matrix, labels: &[bool]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(CasalError::InvalidInput(format!("{n} points but {} labels", labels.len())));
    }
    let n_true = labels.iter().filter(|&&l| l).count();
    if n_true < 2 || n - n_true < 2 {
        return Err(CasalError::InvalidInput(
            "silhouette needs at least two points per cluster".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mut same, mut other) = (0.0, 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = sq_dist(points.row(i), points.row(j)).sqrt();
            if labels[i] == labels[j] {
                same += d;
            } else {
                other += d;
            }
        }
        let n_same = if labels[i] { n_true } else { n - n_true };
        let a = same / (n_same - 1) as f64;
        let b = other / (n - n_same) as f64;
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CasalError::InvalidInput("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Binomial standard error of a rate over `n` trials.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: String,
    pub n_known: usize,
    pub n_unknown: usize,
    pub halluc: f64,
    pub refusal: f64,
    pub acc: f64,
    pub silhouette: Option<f64>,
}

impl MetricsRow {
    pub fn se_halluc(&self) -> f64 {
        binomial_se(self.halluc, self.n_unknown)
    }
    pub fn se_refusal(&self) -> f64 {
        binomial_se(self.refusal, self.n_known)
    }
    pub fn se_acc(&self) -> f64 {
        binomial_se(self.acc, self.n_known)
    }
}

pub const METRICS_CSV_HEADER: &str =
    "run_id,split,n,halluc,refusal,acc,silhouette,se_halluc,se_refusal,se_acc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        let sil = r.silhouette.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
            r.run_id,
            r.split,
            r.n_known + r.n_unknown,
            r.halluc,
            r.refusal,
            r.acc,
            sil,
            r.se_halluc(),
            r.se_refusal(),
            r.se_acc()
        ));
    }
    s
}

/// One line of a completion dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub id: String,
    pub completion: Completion,
    pub matched_abstain: bool,
    pub correct: bool,
}

/// Rates on held-out known / unknown completions, token mode.
pub fn evaluate_split(
    known: &[Completion],
    known_answers: &[Completion],
    unknown: &[Completion],
    matcher: &AbstainMatcher,
) -> Result<(f64, f64, f64)> {
    Ok((
        hallucination_rate(unknown, matcher)?,
        accuracy(known, known_answers, MatchMode::Token)?,
        refusal_rate(known, matcher)?,
    ))
}
