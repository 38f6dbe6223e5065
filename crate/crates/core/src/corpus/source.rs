use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::io::jsonl_lines;
use super::{CorpusError, SourceQuestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    /// `{"qid", "question", "answers": [..]}` per line. Official MRQA files
    /// (a header line followed by `{"context", "qas": [..]}` lines) are also accepted.
    TriviaqaMrqa,
    /// The `SourceQuestion` serialization itself.
    GenericJsonl,
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triviaqa-mrqa" => Ok(SourceFormat::TriviaqaMrqa),
            "generic-jsonl" => Ok(SourceFormat::GenericJsonl),
            other => Err(format!("unknown source format `{other}`")),
        }
    }
}

#[derive(Deserialize)]
struct GenericLine {
    question_id: String,
    question_text: String,
    gold_answers: Vec<String>,
    source_dataset: Option<String>,
}

/// Loads every question in file order. Duplicate ids are rejected.
pub fn load_source_dataset(
    path: impl AsRef<Path>,
    format: SourceFormat,
) -> Result<Vec<SourceQuestion>, CorpusError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("source")
        .to_string();

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, offset, line) in jsonl_lines(&content) {
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            offset,
            message,
        };
        let parsed: Vec<SourceQuestion> = match format {
            SourceFormat::GenericJsonl => {
                let g: GenericLine =
                    serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                vec![SourceQuestion {
                    question_id: g.question_id,
                    question_text: g.question_text,
                    gold_answers: g.gold_answers,
                    source_dataset: g.source_dataset.unwrap_or_else(|| tag.clone()),
                }]
            }
            SourceFormat::TriviaqaMrqa => {
                let v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                if let Some(header) = v.get("header") {
                    if let Some(name) = header.get("dataset").and_then(Value::as_str) {
                        tag = name.to_string();
                    }
                    continue;
                }
                match v.get("qas") {
                    Some(Value::Array(qas)) => qas
                        .iter()
                        .map(|qa| mrqa_question(qa, &tag))
                        .collect::<Result<_, _>>()
                        .map_err(malformed)?,
                    Some(_) => return Err(malformed("`qas` must be an array".into())),
                    None => vec![mrqa_question(&v, &tag).map_err(malformed)?],
                }
            }
        };
        for q in parsed {
            q.validate().map_err(|e| malformed(e.to_string()))?;
            if !seen.insert(q.question_id.clone()) {
                return Err(CorpusError::DuplicateId(q.question_id));
            }
            out.push(q);
        }
    }
    Ok(out)
}

fn mrqa_question(v: &Value, tag: &str) -> Result<SourceQuestion, String> {
    let field = |name: &str| {
        v.get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| format!("missing string field `{name}`"))
    };
    let answers = match v.get("answers") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|a| {
                a.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| "`answers` entries must be strings".to_string())
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err("missing array field `answers`".into()),
    };
    Ok(SourceQuestion {
        question_id: field("qid")?,
        question_text: field("question")?,
        gold_answers: answers,
        source_dataset: tag.to_string(),
    })
}
