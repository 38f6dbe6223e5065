//! Data model shared by every pipeline stage, plus file ingestion and emission.
//!
//! All text is carried as UTF-8 exactly as read. Nothing here normalizes
//! answers; normalization belongs to the matching and metric code.

mod io;
mod manifest;
mod source;

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{load_cf_dataset, read_jsonl, write_cf_dataset, write_jsonl, DatasetRules};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, QuestionOutcomes, Stage};
pub use source::{load_source_dataset, SourceFormat};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line} (byte offset {offset}): {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        offset: u64,
        message: String,
    },
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("invalid record `{qid}`: {reason}")]
    InvalidRecord { qid: String, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Lowercase hex SHA-256 of the exact prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// A question from the factual source set. The first gold answer is canonical,
/// the rest are aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceQuestion {
    pub question_id: String,
    pub question_text: String,
    pub gold_answers: Vec<String>,
    pub source_dataset: String,
}

impl SourceQuestion {
    pub fn canonical_gold(&self) -> &str {
        &self.gold_answers[0]
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidRecord {
            qid: self.question_id.clone(),
            reason: reason.to_string(),
        };
        if self.question_id.is_empty() {
            return Err(invalid("empty question id"));
        }
        if self.gold_answers.is_empty() {
            return Err(invalid("no gold answers"));
        }
        if self.gold_answers.iter().any(|a| a.trim().is_empty()) {
            return Err(invalid("blank gold answer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_id: String,
    pub prompt_hash: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub created_at: DateTime<Utc>,
}

/// Why a completion did not yield a usable (document, answer) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    MissingBlankLine,
    MissingAnswerMarker,
    EmptyDocument,
    EmptyAnswer,
    TrailingGarbage,
    /// The backend call itself failed after retries.
    BackendError,
    /// The backend refused to produce content.
    ContentRefused,
}

impl ViolationReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationReason::MissingBlankLine => "missing_blank_line",
            ViolationReason::MissingAnswerMarker => "missing_answer_marker",
            ViolationReason::EmptyDocument => "empty_document",
            ViolationReason::EmptyAnswer => "empty_answer",
            ViolationReason::TrailingGarbage => "trailing_garbage",
            ViolationReason::BackendError => "backend_error",
            ViolationReason::ContentRefused => "content_refused",
        }
    }
}

impl std::fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed { document: String, answer: String },
    FormatViolation { reason: ViolationReason },
}

/// One sampled recitation for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecitationCandidate {
    #[serde(rename = "qid")]
    pub question_id: String,
    pub sample_index: u32,
    pub raw_completion: String,
    pub parse: ParseStatus,
    pub provenance: Provenance,
}

impl RecitationCandidate {
    pub fn parsed(&self) -> Option<(&str, &str)> {
        match &self.parse {
            ParseStatus::Parsed { document, answer } => Some((document, answer)),
            ParseStatus::FormatViolation { .. } => None,
        }
    }

    pub fn violation(&self) -> Option<ViolationReason> {
        match &self.parse {
            ParseStatus::Parsed { .. } => None,
            ParseStatus::FormatViolation { reason } => Some(*reason),
        }
    }
}

/// Output of a Yes/No judge: raw class masses and the normalized Yes probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub p_yes_raw: f64,
    pub p_no_raw: f64,
    pub normalized_yes: f64,
    /// Every probed token with the probability the backend reported for it.
    pub token_probs: BTreeMap<String, f64>,
}

/// A parsed candidate travelling through the filter stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    #[serde(rename = "qid")]
    pub question_id: String,
    pub sample_index: u32,
    pub document: String,
    pub answer: String,
    pub provenance: Provenance,
    pub surface_match: bool,
    pub factuality: Option<FilterVerdict>,
    pub attribution: Option<FilterVerdict>,
}

impl ScoredCandidate {
    /// Lifts a parsed candidate into filter state. Format violations yield `None`.
    pub fn from_candidate(candidate: &RecitationCandidate) -> Option<Self> {
        let (document, answer) = candidate.parsed()?;
        Some(Self {
            question_id: candidate.question_id.clone(),
            sample_index: candidate.sample_index,
            document: document.to_string(),
            answer: answer.to_string(),
            provenance: candidate.provenance.clone(),
            surface_match: false,
            factuality: None,
            attribution: None,
        })
    }
}

/// A final (question, document, answer) triple. Field order here is the
/// on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    #[serde(rename = "qid")]
    pub question_id: String,
    #[serde(rename = "question")]
    pub question_text: String,
    pub document: String,
    pub answer: String,
    pub original_gold_answer: String,
    pub attribution_score: f64,
    pub factuality_score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(rename = "qid")]
    pub question_id: String,
    #[serde(rename = "answer")]
    pub predicted_answer: String,
}
