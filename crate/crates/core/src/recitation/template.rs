use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceQuestion;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template marker `{0}` is empty")]
    EmptyMarker(&'static str),
    #[error("template marker {0:?} contains a newline")]
    MultilineMarker(String),
    #[error("template markers `{0}` and `{1}` are identical")]
    DuplicateMarker(&'static str, &'static str),
    #[error("template has no exemplars")]
    NoExemplars,
    #[error("exemplar {index}: empty {field}")]
    EmptyExemplarField { index: usize, field: &'static str },
    #[error("text contains template marker {marker:?}: {text:?}")]
    Ambiguous { marker: String, text: String },
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("cannot read template {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecitationExemplar {
    pub question: String,
    pub document: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecitationMarkers {
    pub question: String,
    pub document_intro: String,
    pub answer: String,
}

/// Few-shot prompt asking for a document, then a blank line, then an answer line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecitationPromptTemplate {
    pub preamble: String,
    pub exemplars: Vec<RecitationExemplar>,
    pub markers: RecitationMarkers,
}

const DEFAULT_RECITATION: &str = include_str!("../../templates/recitation.json");

impl Default for RecitationPromptTemplate {
    /// Five public TriviaQA-style exemplars. Replace them for real runs.
    fn default() -> Self {
        serde_json::from_str(DEFAULT_RECITATION).expect("bundled recitation template parses")
    }
}

pub(crate) fn check_markers(markers: &[(&'static str, &str)]) -> Result<(), TemplateError> {
    for (name, m) in markers {
        if m.is_empty() {
            return Err(TemplateError::EmptyMarker(name));
        }
        if m.contains('\n') {
            return Err(TemplateError::MultilineMarker(m.to_string()));
        }
    }
    for (i, (a, ma)) in markers.iter().enumerate() {
        for (b, mb) in &markers[i + 1..] {
            if ma == mb {
                return Err(TemplateError::DuplicateMarker(a, b));
            }
        }
    }
    Ok(())
}

pub(crate) fn reject_markers(text: &str, markers: &[&str]) -> Result<(), TemplateError> {
    match markers.iter().find(|m| text.contains(**m)) {
        Some(m) => Err(TemplateError::Ambiguous {
            marker: m.to_string(),
            text: text.to_string(),
        }),
        None => Ok(()),
    }
}

impl RecitationPromptTemplate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let load_err = |message: String| TemplateError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate_markers(&self) -> Result<(), TemplateError> {
        check_markers(&[
            ("question", &self.markers.question),
            ("document_intro", &self.markers.document_intro),
            ("answer", &self.markers.answer),
        ])
    }

    /// Full check used when loading templates: markers plus at least one
    /// complete exemplar.
    pub fn validate(&self) -> Result<(), TemplateError> {
        self.validate_markers()?;
        if self.exemplars.is_empty() {
            return Err(TemplateError::NoExemplars);
        }
        for (index, ex) in self.exemplars.iter().enumerate() {
            for (field, value) in [
                ("question", &ex.question),
                ("document", &ex.document),
                ("answer", &ex.answer),
            ] {
                if value.trim().is_empty() {
                    return Err(TemplateError::EmptyExemplarField { index, field });
                }
            }
        }
        Ok(())
    }

    fn markers(&self) -> [&str; 3] {
        [
            &self.markers.question,
            &self.markers.document_intro,
            &self.markers.answer,
        ]
    }

    /// Renders `document` and `answer` exactly as a well-formed completion would.
    pub fn render_as_completion(&self, document: &str, answer: &str) -> String {
        format!("{document}\n\n{} {answer}", self.markers.answer)
    }

    /// Preamble, each exemplar as a question/document/answer block, then the
    /// target question followed by an open document slot.
    pub fn build_prompt(&self, question: &SourceQuestion) -> Result<String, TemplateError> {
        self.validate_markers()?;
        reject_markers(&question.question_text, &self.markers())?;
        let m = &self.markers;
        let mut out = String::new();
        if !self.preamble.is_empty() {
            out.push_str(&self.preamble);
            out.push_str("\n\n");
        }
        for ex in &self.exemplars {
            out.push_str(&format!(
                "{} {}\n{}\n{}\n\n",
                m.question,
                ex.question,
                m.document_intro,
                self.render_as_completion(&ex.document, &ex.answer)
            ));
        }
        out.push_str(&format!(
            "{} {}\n{}\n",
            m.question, question.question_text, m.document_intro
        ));
        Ok(out)
    }
}

/// Free-function form of [`RecitationPromptTemplate::build_prompt`].
pub fn build_recitation_prompt(
    template: &RecitationPromptTemplate,
    question: &SourceQuestion,
) -> Result<String, TemplateError> {
    template.build_prompt(question)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::prompt_hash;

    fn question(text: &str) -> SourceQuestion {
        SourceQuestion {
            question_id: "q".into(),
            question_text: text.into(),
            gold_answers: vec!["a".into()],
            source_dataset: "t".into(),
        }
    }

    #[test]
    fn default_template_is_valid_five_shot() {
        let t = RecitationPromptTemplate::default();
        t.validate().unwrap();
        assert_eq!(t.exemplars.len(), 5);
    }

    #[test]
    fn zero_exemplar_rendering() {
        let mut t = RecitationPromptTemplate::default();
        t.exemplars.clear();
        t.preamble = "Recite.".into();
        let p = t.build_prompt(&question("Q?")).unwrap();
        assert_eq!(p, "Recite.\n\nQuestion: Q?\nDocument:\n");
        assert!(t.validate().is_err());
    }

    #[test]
    fn rendering_is_byte_stable() {
        let t = RecitationPromptTemplate::default();
        let a = t.build_prompt(&question("Who wrote Tiger Eyes?")).unwrap();
        let b = t.build_prompt(&question("Who wrote Tiger Eyes?")).unwrap();
        assert_eq!(a, b);
        assert_eq!(prompt_hash(&a), prompt_hash(&b));
    }

    #[test]
    fn five_answer_markers_before_target() {
        let t = RecitationPromptTemplate::default();
        let p = t.build_prompt(&question("Who wrote Tiger Eyes?")).unwrap();
        let target = p.rfind(&t.markers.question).unwrap();
        assert_eq!(p[..target].matches(&t.markers.answer).count(), 5);
        assert_eq!(p[target..].matches(&t.markers.answer).count(), 0);
        assert!(p.ends_with("Question: Who wrote Tiger Eyes?\nDocument:\n"));
    }

    #[test]
    fn question_containing_marker_is_ambiguous() {
        let t = RecitationPromptTemplate::default();
        assert!(matches!(
            t.build_prompt(&question("What follows Answer: here?")),
            Err(TemplateError::Ambiguous { .. })
        ));
    }

    #[test]
    fn duplicate_or_empty_markers_rejected() {
        let mut t = RecitationPromptTemplate::default();
        t.markers.answer = t.markers.question.clone();
        assert!(matches!(t.validate(), Err(TemplateError::DuplicateMarker(..))));
        t.markers.answer = String::new();
        assert!(matches!(t.validate(), Err(TemplateError::EmptyMarker("answer"))));
    }
}
