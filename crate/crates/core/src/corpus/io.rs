use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CorpusError, CounterfactualRecord};
use crate::filters::normalize_answer_surface;

/// Non-blank lines of a JSONL document as `(1-based line, byte offset, text)`.
pub(crate) fn jsonl_lines(content: &str) -> impl Iterator<Item = (usize, u64, &str)> {
    let mut offset = 0u64;
    content
        .split_inclusive('\n')
        .enumerate()
        .filter_map(move |(i, raw)| {
            let start = offset;
            offset += raw.len() as u64;
            let line = raw.trim_end_matches(['\n', '\r']);
            (!line.trim().is_empty()).then_some((i + 1, start, line))
        })
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    jsonl_lines(&content)
        .map(|(line, offset, text)| {
            serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                offset,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes one JSON object per line. The file is replaced atomically.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Invariants enforced when a dataset is emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRules {
    /// Minimum attribution score, or `None` when the attribution filter was disabled.
    pub attribution_threshold: Option<f64>,
    /// Reject records whose answer matches the original gold answer.
    pub require_counterfactual: bool,
}

impl Default for DatasetRules {
    fn default() -> Self {
        Self {
            attribution_threshold: Some(0.5),
            require_counterfactual: true,
        }
    }
}

fn check_record(r: &CounterfactualRecord, rules: &DatasetRules) -> Result<(), CorpusError> {
    let fail = |reason: String| {
        Err(CorpusError::InvalidRecord {
            qid: r.question_id.clone(),
            reason,
        })
    };
    for (name, value) in [
        ("qid", &r.question_id),
        ("question", &r.question_text),
        ("document", &r.document),
        ("answer", &r.answer),
        ("original_gold_answer", &r.original_gold_answer),
    ] {
        if value.trim().is_empty() {
            return fail(format!("empty {name}"));
        }
    }
    for (name, value) in [
        ("attribution_score", r.attribution_score),
        ("factuality_score", r.factuality_score),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return fail(format!("{name} {value} outside [0, 1]"));
        }
    }
    if let Some(t) = rules.attribution_threshold {
        if r.attribution_score < t {
            return fail(format!(
                "attribution_score {} below threshold {t}",
                r.attribution_score
            ));
        }
    }
    if rules.require_counterfactual
        && normalize_answer_surface(&r.answer) == normalize_answer_surface(&r.original_gold_answer)
    {
        return fail("answer matches the gold answer".into());
    }
    Ok(())
}

/// Emits the dataset sorted by question id. Every record is checked before
/// any byte is written, and identical input always gives identical bytes.
pub fn write_cf_dataset(
    records: &[CounterfactualRecord],
    path: impl AsRef<Path>,
    rules: &DatasetRules,
) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for r in records {
        check_record(r, rules)?;
        if !seen.insert(r.question_id.as_str()) {
            return Err(CorpusError::DuplicateId(r.question_id.clone()));
        }
    }
    let mut sorted: Vec<&CounterfactualRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.question_id.as_bytes().cmp(b.question_id.as_bytes()));
    write_jsonl(path, &sorted)
}

pub fn load_cf_dataset(path: impl AsRef<Path>) -> Result<Vec<CounterfactualRecord>, CorpusError> {
    read_jsonl(path)
}
