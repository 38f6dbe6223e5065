use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NliDistribution, NliQuery, NliScorer, QualityError};
use crate::corpus::{prompt_hash, read_jsonl, write_jsonl};

/// One fixture line: the hash of a query and the distribution to return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliFixtureEntry {
    pub query_hash: String,
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliQuery {
    /// SHA-256 of premise and hypothesis joined by a NUL byte.
    pub fn hash(&self) -> String {
        prompt_hash(&format!("{}\u{0}{}", self.premise, self.hypothesis))
    }
}

/// Fixture-backed scorer. Unknown queries fail unless a fallback is set.
#[derive(Debug, Clone, Default)]
pub struct MockNliScorer {
    table: HashMap<String, NliDistribution>,
    fallback: Option<NliDistribution>,
}

impl MockNliScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QualityError> {
        let entries: Vec<NliFixtureEntry> =
            read_jsonl(path).map_err(|e| QualityError::Config(e.to_string()))?;
        let mut s = Self::new();
        for e in entries {
            let d = NliDistribution {
                entailment: e.entailment,
                neutral: e.neutral,
                contradiction: e.contradiction,
            };
            d.validate()?;
            if s.table.insert(e.query_hash.clone(), d).is_some() {
                return Err(QualityError::Config(format!("duplicate query_hash {}", e.query_hash)));
            }
        }
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), QualityError> {
        let mut entries: Vec<NliFixtureEntry> = self
            .table
            .iter()
            .map(|(h, d)| NliFixtureEntry {
                query_hash: h.clone(),
                entailment: d.entailment,
                neutral: d.neutral,
                contradiction: d.contradiction,
            })
            .collect();
        entries.sort_by(|a, b| a.query_hash.cmp(&b.query_hash));
        write_jsonl(path, &entries).map_err(|e| QualityError::Config(e.to_string()))
    }

    pub fn insert(&mut self, query: &NliQuery, dist: NliDistribution) {
        self.table.insert(query.hash(), dist);
    }

    pub fn with_fallback(mut self, dist: NliDistribution) -> Self {
        self.fallback = Some(dist);
        self
    }
}

impl NliScorer for MockNliScorer {
    fn id(&self) -> &str {
        "mock-nli"
    }

    fn score(&self, query: &NliQuery) -> Result<NliDistribution, QualityError> {
        let h = query.hash();
        self.table
            .get(&h)
            .copied()
            .or(self.fallback)
            .ok_or_else(|| QualityError::Scorer {
                scorer: self.id().into(),
                message: format!("no fixture entry for query {h}"),
            })
    }
}
