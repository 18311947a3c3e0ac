//! Run configuration: one TOML file, every field defaulted, plus
//! `CASAL_`-prefixed environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use casal_core::corpus::{FactWorldSpec, TrainOptions};
use casal_core::flops::ArchSpec;
use casal_core::model::{MoeConfig, PositionPolicy};
use casal_core::probe::Matcher;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "CASAL_";

pub const ALL_STAGES: &[&str] = &[
    "corpus", "pretrain", "probe", "steer", "select", "train", "eval", "caa", "sft", "sweep", "report", "flops",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub stages: Vec<String>,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSection,
    pub steering: SteeringConfig,
    pub casal: CasalConfig,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            stages: ALL_STAGES.iter().map(|s| s.to_string()).collect(),
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeSection::default(),
            steering: SteeringConfig::default(),
            casal: CasalConfig::default(),
            eval: EvalConfig::default(),
            baselines: BaselineConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Synthetic fact world. Its `seed` is replaced by the master seed.
    pub world: FactWorldSpec,
    /// External query records (JSONL). Requires `pretrain.checkpoint`.
    pub queries: Option<PathBuf>,
    pub eos_token: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            world: FactWorldSpec::default(),
            queries: None,
            eos_token: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layer: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_ctx: usize,
    pub moe: Option<MoeConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layer: 6,
            d_model: 64,
            d_attn: 64,
            n_heads: 4,
            d_ff: 128,
            n_ctx: 8,
            moe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    #[serde(flatten)]
    pub options: TrainOptions,
    /// Use this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            options: TrainOptions::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub k: usize,
    pub tau: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub matcher: Matcher,
    /// Thresholds for the robustness sweep; each must exceed `k/2`.
    pub taus: Vec<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            k: 10,
            tau: 7,
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            max_new_tokens: 2,
            matcher: Matcher::ExactToken,
            taus: vec![6, 7, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub alpha: f64,
    /// Candidate layers for selection; empty means every layer.
    pub layers: Vec<usize>,
    /// Skip selection and use this layer.
    pub layer: Option<usize>,
    /// Strengths tried by the CAA selection sweep.
    pub select_alphas: Vec<f64>,
    /// Largest tolerated known-accuracy drop during selection.
    pub accuracy_budget: f64,
    pub positions: PositionPolicy,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            layers: Vec::new(),
            layer: None,
            select_alphas: vec![1.0, 2.0, 4.0, 6.0, 8.0],
            accuracy_budget: 0.05,
            positions: PositionPolicy::AllTokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasalConfig {
    pub submodule: String,
    pub lr: f64,
    pub epochs: usize,
    /// Rows per update; 0 means full batch.
    pub batch_size: usize,
    /// Maximum cached training rows.
    pub data_budget: usize,
    pub snapshot_every: usize,
    /// Fractions of the training rows for the data-size sweep.
    pub budget_fractions: Vec<f64>,
}

impl Default for CasalConfig {
    fn default() -> Self {
        Self {
            submodule: "down".into(),
            lr: 1e-3,
            epochs: 3,
            batch_size: 16,
            data_budget: 640,
            snapshot_every: 4,
            budget_fractions: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new_tokens: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub caa: bool,
    pub sft: bool,
    pub sft_options: TrainOptions,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            caa: true,
            sft: true,
            sft_options: TrainOptions {
                lr: 1e-3,
                steps: 100,
                batch: 32,
                val_size: 0,
                ..TrainOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub spec: ArchSpec,
    pub context: bool,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            spec: ArchSpec::llama_8b(),
            context: false,
        }
    }
}

/// `CASAL_A__B=v` sets `a.b = v`; the value is parsed as a TOML literal and
/// falls back to a string.
fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().context("empty override key")?;
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Parses `text`, applies overrides, and returns the config together with
/// the overrides that were applied.
pub fn parse_config(text: &str, env: &[(String, String)]) -> Result<(RunConfig, Vec<(String, String)>)> {
    let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    let mut applied = Vec::new();
    let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        apply_override(&mut table, &k[ENV_PREFIX.len()..], v)?;
        applied.push((k.clone(), v.clone()));
    }
    let config: RunConfig = table.try_into().context("invalid run config")?;
    config.validate()?;
    Ok((config, applied))
}

pub fn load_config(path: Option<&Path>) -> Result<(RunConfig, Vec<(String, String)>)> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let env: Vec<(String, String)> = std::env::vars().collect();
    parse_config(&text, &env)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            if !ALL_STAGES.contains(&s.as_str()) {
                bail!("unknown stage {s:?}; known stages: {}", ALL_STAGES.join(", "));
            }
        }
        casal_core::probe::check_threshold(self.probe.k, self.probe.tau)?;
        for &t in &self.probe.taus {
            casal_core::probe::check_threshold(self.probe.k, t)?;
        }
        if self.corpus.queries.is_some() && self.pretrain.checkpoint.is_none() {
            bail!("external queries need pretrain.checkpoint");
        }
        if !(self.casal.lr >= 0.0) {
            bail!("casal.lr must be non-negative");
        }
        if self.casal.snapshot_every == 0 {
            bail!("casal.snapshot_every must be positive");
        }
        Ok(())
    }

    pub fn world_spec(&self) -> FactWorldSpec {
        FactWorldSpec {
            seed: self.seed,
            ..self.corpus.world.clone()
        }
    }

    pub fn stage_enabled(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }
}
