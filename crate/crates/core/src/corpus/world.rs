//! Synthetic fact world over a closed symbolic vocabulary.
//!
//! Every entity is mentioned in the stream (`BOS e ISA type EOS`) so that its
//! embedding is trained, but only trained facts are ever stated. A pool of
//! extra "obscure" entities is paired with the abstain token, which gives the
//! model an abstention behaviour to fall back on for facts it never saw.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{Provenance, QueryRecord};
use crate::error::{CasalError, Result};
use crate::model::LmExample;

/// One position of a prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSym {
    Bos,
    Entity,
    Relation,
    Query,
    Isa,
    /// A fixed token id.
    Literal(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactWorldSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts_total: usize,
    pub fraction_trained: f64,
    /// Must be one of the reserved ids `0..N_SPECIAL`.
    pub abstain_token: u32,
    /// Prompt pattern per relation; empty means `BOS entity relation QUERY`
    /// for every relation.
    pub templates: Vec<Vec<TemplateSym>>,
    pub seed: u64,
    /// Distinct answer values.
    pub n_values: usize,
    /// Occurrences of each trained fact in the stream.
    pub fact_repeats: usize,
    /// Entity type classes used for mention sequences.
    pub n_types: usize,
    pub mention_repeats: usize,
    /// Extra entities that only ever appear with the abstain token.
    pub n_abstain_entities: usize,
    pub abstain_repeats: usize,
    /// Upper bound on the vocabulary, if the model size is fixed in advance.
    pub max_vocab: Option<usize>,
}

impl Default for FactWorldSpec {
    fn default() -> Self {
        Self {
            n_entities: 400,
            n_relations: 4,
            n_facts_total: 400,
            fraction_trained: 0.5,
            abstain_token: 2,
            templates: Vec::new(),
            seed: 0,
            n_values: 64,
            fact_repeats: 32,
            n_types: 8,
            mention_repeats: 8,
            n_abstain_entities: 200,
            abstain_repeats: 32,
            max_vocab: None,
        }
    }
}

pub const N_SPECIAL: u32 = 5;

/// Token id assignment for a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub bos: u32,
    pub eos: u32,
    pub abstain: u32,
    pub query: u32,
    pub isa: u32,
    pub entity0: u32,
    pub relation0: u32,
    pub value0: u32,
    pub type0: u32,
    pub pool0: u32,
    pub size: usize,
}

impl VocabLayout {
    pub fn new(spec: &FactWorldSpec) -> Result<Self> {
        if spec.abstain_token >= N_SPECIAL {
            return Err(CasalError::InvalidConfig(format!(
                "abstain_token must be a reserved id below {N_SPECIAL}, got {}",
                spec.abstain_token
            )));
        }
        let mut others = (0..N_SPECIAL).filter(|&t| t != spec.abstain_token);
        let mut next = || others.next().expect("five reserved ids");
        let (bos, eos, query, isa) = (next(), next(), next(), next());
        let entity0 = N_SPECIAL as usize;
        let relation0 = entity0 + spec.n_entities;
        let value0 = relation0 + spec.n_relations;
        let type0 = value0 + spec.n_values;
        let pool0 = type0 + spec.n_types;
        let size = pool0 + spec.n_abstain_entities;
        if size > u32::MAX as usize || spec.max_vocab.is_some_and(|m| size > m) {
            return Err(CasalError::InvalidConfig(format!(
                "vocabulary too small: world needs {size} ids, limit {:?}",
                spec.max_vocab
            )));
        }
        Ok(Self {
            bos,
            eos,
            abstain: spec.abstain_token,
            query,
            isa,
            entity0: entity0 as u32,
            relation0: relation0 as u32,
            value0: value0 as u32,
            type0: type0 as u32,
            pool0: pool0 as u32,
            size,
        })
    }

    pub fn entity(&self, e: usize) -> u32 {
        self.entity0 + e as u32
    }
    pub fn relation(&self, r: usize) -> u32 {
        self.relation0 + r as u32
    }
    pub fn value(&self, v: usize) -> u32 {
        self.value0 + v as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub entity: usize,
    pub relation: usize,
    pub value: usize,
    pub trained: bool,
}

#[derive(Debug, Clone)]
pub struct FactWorld {
    pub spec: FactWorldSpec,
    pub vocab: VocabLayout,
    pub facts: Vec<Fact>,
    /// Pretraining sequences in stream order.
    pub stream: Vec<LmExample>,
    /// One query per fact, in fact order.
    pub queries: Vec<QueryRecord>,
}

impl FactWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CasalError::InvalidConfig(m));
        if self.n_entities == 0 || self.n_relations == 0 || self.n_values == 0 || self.n_types == 0 {
            return bad("entity, relation, value and type counts must be positive".into());
        }
        if self.n_facts_total == 0 || self.n_facts_total > self.n_entities * self.n_relations {
            return bad(format!(
                "n_facts_total must be in 1..={} (entities × relations), got {}",
                self.n_entities * self.n_relations,
                self.n_facts_total
            ));
        }
        if !(self.fraction_trained > 0.0 && self.fraction_trained <= 1.0) {
            return bad(format!("fraction_trained must be in (0, 1], got {}", self.fraction_trained));
        }
        if self.fact_repeats == 0 {
            return bad("fact_repeats must be positive".into());
        }
        if !self.templates.is_empty() {
            if self.templates.len() != self.n_relations {
                return bad(format!(
                    "{} templates given for {} relations",
                    self.templates.len(),
                    self.n_relations
                ));
            }
            for t in &self.templates {
                if !t.contains(&TemplateSym::Entity) || t.last() != Some(&TemplateSym::Query) {
                    return bad("templates must mention the entity and end with the query marker".into());
                }
            }
        }
        Ok(())
    }

    pub fn template(&self, relation: usize) -> Vec<TemplateSym> {
        self.templates.get(relation).cloned().unwrap_or_else(|| {
            vec![TemplateSym::Bos, TemplateSym::Entity, TemplateSym::Relation, TemplateSym::Query]
        })
    }

    pub fn n_trained(&self) -> usize {
        ((self.n_facts_total as f64) * self.fraction_trained).round() as usize
    }
}

/// Relations in the lower half are tagged `group1`, the rest `group2`.
pub fn relation_group(relation: usize, n_relations: usize) -> &'static str {
    if relation < n_relations.div_ceil(2) {
        "group1"
    } else {
        "group2"
    }
}

pub fn render_prompt(spec: &FactWorldSpec, vocab: &VocabLayout, entity_tok: u32, relation: usize) -> Vec<u32> {
    spec.template(relation)
        .into_iter()
        .map(|s| match s {
            TemplateSym::Bos => vocab.bos,
            TemplateSym::Entity => entity_tok,
            TemplateSym::Relation => vocab.relation(relation),
            TemplateSym::Query => vocab.query,
            TemplateSym::Isa => vocab.isa,
            TemplateSym::Literal(t) => t,
        })
        .collect()
}

pub fn generate_fact_world(spec: &FactWorldSpec) -> Result<FactWorld> {
    spec.validate()?;
    let vocab = VocabLayout::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // facts: entities visited in shuffled round-robin order, each time with
    // a relation the entity does not have yet
    let mut entity_order: Vec<usize> = (0..spec.n_entities).collect();
    entity_order.shuffle(&mut rng);
    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); spec.n_entities];
    let mut keyed = Vec::with_capacity(spec.n_facts_total);
    for i in 0..spec.n_facts_total {
        let e = entity_order[i % spec.n_entities];
        let free: Vec<usize> = (0..spec.n_relations).filter(|r| !used[e].contains(r)).collect();
        let r = *free.choose(&mut rng).expect("fact count bounded by entities × relations");
        used[e].insert(r);
        // (rank of the entity in the shuffled order, round)
        keyed.push(((i % spec.n_entities, i / spec.n_entities), e, r, rng.gen_range(0..spec.n_values)));
    }
    // entity-grouped order, so the trained prefix keeps entities whole
    keyed.sort_by_key(|&(key, _, _, _)| key);
    let n_trained = spec.n_trained();
    let facts: Vec<Fact> = keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, entity, relation, value))| Fact {
            id: format!("fact-{i:05}"),
            entity,
            relation,
            value,
            trained: i < n_trained,
        })
        .collect();

    let types: Vec<usize> = (0..spec.n_entities + spec.n_abstain_entities)
        .map(|_| rng.gen_range(0..spec.n_types))
        .collect();

    let mut stream = Vec::new();
    for f in facts.iter().filter(|f| f.trained) {
        let prompt = render_prompt(spec, &vocab, vocab.entity(f.entity), f.relation);
        let start = prompt.len() - 2;
        let mut tokens = prompt;
        tokens.extend([vocab.value(f.value), vocab.eos]);
        for _ in 0..spec.fact_repeats {
            stream.push(LmExample {
                tokens: tokens.clone(),
                loss_start: start,
            });
        }
    }
    let mention = |tok: u32, ty: usize| LmExample {
        tokens: vec![vocab.bos, tok, vocab.isa, vocab.type0 + ty as u32, vocab.eos],
        loss_start: 2,
    };
    for e in 0..spec.n_entities {
        for _ in 0..spec.mention_repeats {
            stream.push(mention(vocab.entity(e), types[e]));
        }
    }
    for i in 0..spec.n_abstain_entities {
        let tok = vocab.pool0 + i as u32;
        for _ in 0..spec.mention_repeats {
            stream.push(mention(tok, types[spec.n_entities + i]));
        }
        for _ in 0..spec.abstain_repeats {
            let r = rng.gen_range(0..spec.n_relations);
            let prompt = render_prompt(spec, &vocab, tok, r);
            let start = prompt.len() - 2;
            let mut tokens = prompt;
            tokens.extend([vocab.abstain, vocab.eos]);
            stream.push(LmExample {
                tokens,
                loss_start: start,
            });
        }
    }
    stream.shuffle(&mut rng);

    let queries = facts
        .iter()
        .map(|f| QueryRecord {
            id: f.id.clone(),
            prompt_tokens: render_prompt(spec, &vocab, vocab.entity(f.entity), f.relation),
            answer_tokens: vec![vocab.value(f.value), vocab.eos],
            prompt_text: None,
            answer_text: None,
            provenance: if f.trained {
                Provenance::SyntheticTrained
            } else {
                Provenance::SyntheticHeldout
            },
            group_tag: relation_group(f.relation, spec.n_relations).to_string(),
        })
        .collect();

    Ok(FactWorld {
        spec: spec.clone(),
        vocab,
        facts,
        stream,
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub spec: FactWorldSpec,
    pub vocab: VocabLayout,
    pub n_stream_sequences: usize,
    pub trained_ids: Vec<String>,
    pub heldout_ids: Vec<String>,
    pub groups: BTreeMap<String, usize>,
}

impl FactWorld {
    pub fn manifest(&self) -> WorldManifest {
        let mut groups = BTreeMap::new();
        for q in &self.queries {
            *groups.entry(q.group_tag.clone()).or_insert(0) += 1;
        }
        WorldManifest {
            spec: self.spec.clone(),
            vocab: self.vocab,
            n_stream_sequences: self.stream.len(),
            trained_ids: self.facts.iter().filter(|f| f.trained).map(|f| f.id.clone()).collect(),
            heldout_ids: self.facts.iter().filter(|f| !f.trained).map(|f| f.id.clone()).collect(),
            groups,
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn stop_tokens(&self) -> Vec<u32> {
        vec![self.vocab.eos, self.vocab.abstain]
    }

    pub fn trained_queries(&self) -> Vec<&QueryRecord> {
        self.queries
            .iter()
            .filter(|q| q.provenance == Provenance::SyntheticTrained)
            .collect()
    }

    pub fn heldout_queries(&self) -> Vec<&QueryRecord> {
        self.queries
            .iter()
            .filter(|q| q.provenance == Provenance::SyntheticHeldout)
            .collect()
    }
}
