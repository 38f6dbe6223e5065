use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FilterError;
use crate::corpus::{FilterVerdict, SourceQuestion};
use crate::gateway::Gateway;
use crate::recitation::{check_markers, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeLabel {
    Yes,
    No,
}

impl JudgeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeLabel::Yes => "Yes",
            JudgeLabel::No => "No",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeExemplar {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub answer: String,
    pub label: JudgeLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeMarkers {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub answer: String,
    /// The query line; exemplars end it with their label, the target leaves it open.
    pub verdict: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeKind {
    /// Question, gold answer, generated answer. Never shows a document.
    Factuality,
    /// Question, document, answer.
    Attribution,
}

/// Few-shot Yes/No judge prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeTemplate {
    pub preamble: String,
    pub exemplars: Vec<JudgeExemplar>,
    pub markers: JudgeMarkers,
}

const DEFAULT_FACTUALITY: &str = include_str!("../../templates/factuality.json");
const DEFAULT_ATTRIBUTION: &str = include_str!("../../templates/attribution.json");

impl JudgeTemplate {
    /// Eight exemplars: four same-answer/different-surface, four different answers.
    pub fn default_factuality() -> Self {
        serde_json::from_str(DEFAULT_FACTUALITY).expect("bundled factuality template parses")
    }

    /// Five exemplars mixing grounded and ungrounded answers.
    pub fn default_attribution() -> Self {
        serde_json::from_str(DEFAULT_ATTRIBUTION).expect("bundled attribution template parses")
    }

    pub fn load(path: impl AsRef<Path>, kind: JudgeKind) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let load_err = |message: String| TemplateError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        t.validate(kind)?;
        Ok(t)
    }

    pub fn validate(&self, kind: JudgeKind) -> Result<(), TemplateError> {
        let m = &self.markers;
        let slot = match kind {
            JudgeKind::Factuality => ("gold_answer", m.gold_answer.as_deref()),
            JudgeKind::Attribution => ("document", m.document.as_deref()),
        };
        let slot_marker = slot.1.ok_or(TemplateError::EmptyMarker(slot.0))?;
        check_markers(&[
            ("question", &m.question),
            (slot.0, slot_marker),
            ("answer", &m.answer),
            ("verdict", &m.verdict),
        ])?;
        if self.exemplars.is_empty() {
            return Err(TemplateError::NoExemplars);
        }
        for (index, ex) in self.exemplars.iter().enumerate() {
            let slot_value = match kind {
                JudgeKind::Factuality => {
                    if ex.document.is_some() {
                        return Err(TemplateError::EmptyExemplarField {
                            index,
                            field: "document (factuality exemplars must not carry one)",
                        });
                    }
                    ex.gold_answer.as_deref()
                }
                JudgeKind::Attribution => ex.document.as_deref(),
            };
            for (field, value) in [
                ("question", Some(ex.question.as_str())),
                (slot.0, slot_value),
                ("answer", Some(ex.answer.as_str())),
            ] {
                if value.is_none_or(|v| v.trim().is_empty()) {
                    return Err(TemplateError::EmptyExemplarField { index, field });
                }
            }
        }
        Ok(())
    }

    fn render(&self, kind: JudgeKind, blocks: impl Iterator<Item = [String; 3]>, labels: &[Option<JudgeLabel>]) -> String {
        let m = &self.markers;
        let slot_marker = match kind {
            JudgeKind::Factuality => m.gold_answer.as_deref().unwrap_or_default(),
            JudgeKind::Attribution => m.document.as_deref().unwrap_or_default(),
        };
        let mut out = String::new();
        if !self.preamble.is_empty() {
            out.push_str(&self.preamble);
            out.push_str("\n\n");
        }
        let rendered: Vec<String> = blocks
            .zip(labels)
            .map(|([q, slot, a], label)| {
                let verdict = match label {
                    Some(l) => format!("{} {}", m.verdict, l.as_str()),
                    None => m.verdict.clone(),
                };
                format!(
                    "{} {q}\n{slot_marker} {slot}\n{} {a}\n{verdict}",
                    m.question, m.answer
                )
            })
            .collect();
        out.push_str(&rendered.join("\n\n"));
        out
    }
}

fn require(fields: &[(&'static str, &str)]) -> Result<(), TemplateError> {
    match fields.iter().find(|(_, v)| v.trim().is_empty()) {
        Some((name, _)) => Err(TemplateError::EmptyField(name)),
        None => Ok(()),
    }
}

/// Factuality prompt: exemplars, then the target asking whether the generated
/// answer is the same answer as the gold one. Contains no document text.
pub fn build_factuality_prompt(
    template: &JudgeTemplate,
    question: &str,
    generated_answer: &str,
    gold_answer: &str,
) -> Result<String, TemplateError> {
    require(&[
        ("question", question),
        ("generated_answer", generated_answer),
        ("gold_answer", gold_answer),
    ])?;
    let mut blocks: Vec<[String; 3]> = template
        .exemplars
        .iter()
        .map(|e| {
            [
                e.question.clone(),
                e.gold_answer.clone().unwrap_or_default(),
                e.answer.clone(),
            ]
        })
        .collect();
    blocks.push([
        question.to_string(),
        gold_answer.to_string(),
        generated_answer.to_string(),
    ]);
    let mut labels: Vec<Option<JudgeLabel>> = template.exemplars.iter().map(|e| Some(e.label)).collect();
    labels.push(None);
    Ok(template.render(JudgeKind::Factuality, blocks.into_iter(), &labels))
}

/// Attribution prompt: exemplars, then the target asking whether the answer
/// is grounded in the document.
pub fn build_attribution_prompt(
    template: &JudgeTemplate,
    question: &str,
    document: &str,
    answer: &str,
) -> Result<String, TemplateError> {
    require(&[("question", question), ("document", document), ("answer", answer)])?;
    let mut blocks: Vec<[String; 3]> = template
        .exemplars
        .iter()
        .map(|e| {
            [
                e.question.clone(),
                e.document.clone().unwrap_or_default(),
                e.answer.clone(),
            ]
        })
        .collect();
    blocks.push([question.to_string(), document.to_string(), answer.to_string()]);
    let mut labels: Vec<Option<JudgeLabel>> = template.exemplars.iter().map(|e| Some(e.label)).collect();
    labels.push(None);
    Ok(template.render(JudgeKind::Attribution, blocks.into_iter(), &labels))
}

/// `p_yes / (p_yes + p_no)`; undefined when both are zero.
pub fn normalized_yes(p_yes: f64, p_no: f64) -> Result<f64, FilterError> {
    for p in [p_yes, p_no] {
        if !(0.0..=1.0).contains(&p) {
            return Err(FilterError::InvalidProbability(p));
        }
    }
    let mass = p_yes + p_no;
    if mass == 0.0 {
        return Err(FilterError::ZeroMass);
    }
    Ok(p_yes / mass)
}

/// Queries the next-token probabilities of every Yes and No variant, sums
/// each class and normalizes.
pub fn judge_verdict(
    gateway: &Gateway,
    prompt: &str,
    yes_variants: &[String],
    no_variants: &[String],
) -> Result<FilterVerdict, FilterError> {
    let tokens: Vec<String> = yes_variants.iter().chain(no_variants).cloned().collect();
    let dist = gateway.next_token_probabilities(prompt, &tokens)?;
    let p_yes_raw: f64 = yes_variants.iter().map(|t| dist.get(t)).sum();
    let p_no_raw: f64 = no_variants.iter().map(|t| dist.get(t)).sum();
    Ok(FilterVerdict {
        p_yes_raw,
        p_no_raw,
        normalized_yes: normalized_yes(p_yes_raw, p_no_raw)?,
        token_probs: dist.entries,
    })
}

/// Yes means "the generated answer is the same (factual) answer".
pub fn factuality_verdict(
    gateway: &Gateway,
    prompt: &str,
    yes_variants: &[String],
    no_variants: &[String],
) -> Result<FilterVerdict, FilterError> {
    judge_verdict(gateway, prompt, yes_variants, no_variants)
}

/// Source of factuality and attribution verdicts for the filter stages.
pub trait Judge: Sync {
    fn factuality(&self, question: &SourceQuestion, answer: &str) -> Result<FilterVerdict, FilterError>;

    fn attribution(
        &self,
        question: &SourceQuestion,
        document: &str,
        answer: &str,
    ) -> Result<FilterVerdict, FilterError>;

    /// Concurrent verdict requests the stage may issue.
    fn parallelism(&self) -> usize {
        1
    }
}

/// Judge backed by a Yes/No-probing LLM behind a [`Gateway`].
pub struct LlmJudge<'a> {
    pub gateway: &'a Gateway,
    pub factuality_template: &'a JudgeTemplate,
    pub attribution_template: &'a JudgeTemplate,
    pub yes_variants: Vec<String>,
    pub no_variants: Vec<String>,
}

impl Judge for LlmJudge<'_> {
    fn factuality(&self, question: &SourceQuestion, answer: &str) -> Result<FilterVerdict, FilterError> {
        let prompt = build_factuality_prompt(
            self.factuality_template,
            &question.question_text,
            answer,
            question.canonical_gold(),
        )?;
        factuality_verdict(self.gateway, &prompt, &self.yes_variants, &self.no_variants)
    }

    fn attribution(
        &self,
        question: &SourceQuestion,
        document: &str,
        answer: &str,
    ) -> Result<FilterVerdict, FilterError> {
        let prompt =
            build_attribution_prompt(self.attribution_template, &question.question_text, document, answer)?;
        judge_verdict(self.gateway, &prompt, &self.yes_variants, &self.no_variants)
    }

    fn parallelism(&self) -> usize {
        self.gateway.max_inflight()
    }
}
