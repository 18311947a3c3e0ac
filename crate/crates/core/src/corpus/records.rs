//! Query records and their line-delimited JSON file format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CasalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SyntheticTrained,
    SyntheticHeldout,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    /// Ends where answer generation begins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default = "external")]
    pub provenance: Provenance,
    #[serde(default)]
    pub group_tag: String,
}

fn external() -> Provenance {
    Provenance::External
}

impl QueryRecord {
    pub fn has_answer(&self) -> bool {
        !self.answer_tokens.is_empty() || self.answer_text.as_deref().is_some_and(|t| !t.is_empty())
    }

    fn has_prompt(&self) -> bool {
        !self.prompt_tokens.is_empty() || self.prompt_text.is_some()
    }
}

/// Parses one record per non-blank line, preserving file order.
pub fn parse_qa_records(text: &str) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| CasalError::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !rec.has_prompt() {
            return Err(CasalError::MalformedRecord {
                line: line_no,
                reason: "missing prompt_tokens / prompt_text".into(),
            });
        }
        if !rec.has_answer() {
            return Err(CasalError::MalformedRecord {
                line: line_no,
                reason: format!("record {:?} has an empty answer", rec.id),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(CasalError::DuplicateId {
                id: rec.id,
                line: line_no,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_qa_records(path: &Path) -> Result<Vec<QueryRecord>> {
    parse_qa_records(&std::fs::read_to_string(path)?)
}

pub fn qa_records_to_string(records: &[QueryRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{}", serde_json::to_string(r)?).expect("write to string");
    }
    Ok(s)
}

pub fn write_qa_records(path: &Path, records: &[QueryRecord]) -> Result<()> {
    std::fs::write(path, qa_records_to_string(records)?)?;
    Ok(())
}
