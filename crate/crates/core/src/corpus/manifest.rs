use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_atomic;
use super::CorpusError;

/// Pipeline stages in execution order. The derived `Ord` follows that order,
/// which also fixes the key order of the serialized maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    QuestionsIn,
    RawSamples,
    Parsed,
    PostSurface,
    PostFactuality,
    PostAttribution,
    Selected,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::QuestionsIn,
        Stage::RawSamples,
        Stage::Parsed,
        Stage::PostSurface,
        Stage::PostFactuality,
        Stage::PostAttribution,
        Stage::Selected,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::QuestionsIn => "questions_in",
            Stage::RawSamples => "raw_samples",
            Stage::Parsed => "parsed",
            Stage::PostSurface => "post_surface",
            Stage::PostFactuality => "post_factuality",
            Stage::PostAttribution => "post_attribution",
            Stage::Selected => "selected",
        }
    }
}

/// Terminal category of every input question after selection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcomes {
    pub selected: u64,
    pub no_survivors: u64,
    pub all_parse_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub stage_counts: BTreeMap<Stage, u64>,
    /// `count(stage) / count(previous stage)` from `parsed` onward. Omitted
    /// when the previous count is zero.
    pub retention_rates: BTreeMap<Stage, f64>,
    pub samples_per_question: u32,
    pub seed: u64,
    /// Candidates dropped because a judge produced no usable verdict, per stage.
    #[serde(default)]
    pub verdict_errors: BTreeMap<Stage, u64>,
    /// Questions for which every sample failed at the backend.
    #[serde(default)]
    pub backend_failed_questions: Vec<String>,
    #[serde(default)]
    pub outcomes: Option<QuestionOutcomes>,
    /// Mean count of distinct normalized answers among parsed samples, over
    /// questions with at least one parsed sample.
    #[serde(default)]
    pub unique_answers_per_question: Option<f64>,
    pub config_snapshot: serde_json::Value,
}

impl DatasetManifest {
    pub fn new(seed: u64, samples_per_question: u32, config_snapshot: serde_json::Value) -> Self {
        Self {
            stage_counts: BTreeMap::new(),
            retention_rates: BTreeMap::new(),
            samples_per_question,
            seed,
            verdict_errors: BTreeMap::new(),
            backend_failed_questions: Vec::new(),
            outcomes: None,
            unique_answers_per_question: None,
            config_snapshot,
        }
    }

    pub fn count(&self, stage: Stage) -> Option<u64> {
        self.stage_counts.get(&stage).copied()
    }

    pub fn set_count(&mut self, stage: Stage, n: u64) {
        self.stage_counts.insert(stage, n);
        self.recompute_retention();
    }

    pub fn recompute_retention(&mut self) {
        self.retention_rates.clear();
        for pair in Stage::ALL[1..].windows(2) {
            let (prev, cur) = (pair[0], pair[1]);
            if let (Some(p), Some(c)) = (self.count(prev), self.count(cur)) {
                if p > 0 {
                    self.retention_rates.insert(cur, c as f64 / p as f64);
                }
            }
        }
    }

    /// Checks the shrinkage chain `selected <= ... <= parsed <= raw_samples`
    /// and `raw_samples = questions_in * samples_per_question`.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if let (Some(q), Some(raw)) = (self.count(Stage::QuestionsIn), self.count(Stage::RawSamples)) {
            let expected = q * u64::from(self.samples_per_question);
            if raw != expected {
                return Err(CorpusError::InvalidManifest(format!(
                    "raw_samples {raw} != questions_in {q} x {}",
                    self.samples_per_question
                )));
            }
        }
        let chain: Vec<(Stage, u64)> = Stage::ALL[1..]
            .iter()
            .filter_map(|s| self.count(*s).map(|n| (*s, n)))
            .collect();
        for w in chain.windows(2) {
            let ((ps, p), (cs, c)) = (w[0], w[1]);
            if c > p {
                return Err(CorpusError::InvalidManifest(format!(
                    "{} count {c} exceeds {} count {p}",
                    cs.as_str(),
                    ps.as_str()
                )));
            }
        }
        if let (Some(o), Some(q)) = (&self.outcomes, self.count(Stage::QuestionsIn)) {
            let total = o.selected + o.no_survivors + o.all_parse_failures;
            if total != q {
                return Err(CorpusError::InvalidManifest(format!(
                    "question outcomes sum to {total}, expected {q}"
                )));
            }
        }
        Ok(())
    }
}

/// Validates, then writes pretty-printed JSON with a stable key order.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    manifest.validate()?;
    let mut m = manifest.clone();
    m.recompute_retention();
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        offset: 0,
        message: e.to_string(),
    })
}
