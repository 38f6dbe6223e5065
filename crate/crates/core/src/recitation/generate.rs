use serde::{Deserialize, Serialize};

use super::{parse_recitation_with, RecitationPromptTemplate, TemplateError};
use crate::corpus::{
    prompt_hash, ParseStatus, Provenance, RecitationCandidate, SourceQuestion, ViolationReason,
};
use crate::gateway::{parallel_map, CompletionRequest, Gateway, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecitationConfig {
    pub k_samples: u32,
    pub temperature: f64,
    pub max_output_units: u32,
    pub stop_sequences: Vec<String>,
    pub multiline_answers: bool,
}

impl Default for RecitationConfig {
    fn default() -> Self {
        Self {
            k_samples: 24,
            temperature: 0.7,
            max_output_units: 512,
            stop_sequences: Vec::new(),
            multiline_answers: false,
        }
    }
}

impl RecitationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_samples == 0 {
            return Err("k_samples must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_output_units == 0 {
            return Err("max_output_units must be positive".into());
        }
        Ok(())
    }
}

/// Samples `k_samples` recitations for one question, ordered by sample index.
/// Backend failures become `FormatViolation` candidates instead of errors.
pub fn generate_recitations(
    gateway: &Gateway,
    template: &RecitationPromptTemplate,
    config: &RecitationConfig,
    question: &SourceQuestion,
    seed: u64,
) -> Result<Vec<RecitationCandidate>, TemplateError> {
    Ok(generate_many(gateway, template, config, std::slice::from_ref(question), seed)?
        .pop()
        .unwrap_or_default())
}

/// Fans out over every (question, sample) pair through the gateway and
/// reassembles per-question lists in sample order.
pub fn generate_many(
    gateway: &Gateway,
    template: &RecitationPromptTemplate,
    config: &RecitationConfig,
    questions: &[SourceQuestion],
    seed: u64,
) -> Result<Vec<Vec<RecitationCandidate>>, TemplateError> {
    let prompts: Vec<String> = questions
        .iter()
        .map(|q| template.build_prompt(q))
        .collect::<Result<_, _>>()?;
    let k = config.k_samples;
    let jobs: Vec<(usize, u32)> = (0..questions.len())
        .flat_map(|qi| (0..k).map(move |s| (qi, s)))
        .collect();
    let results = parallel_map(&jobs, gateway.max_inflight(), |&(qi, sample_index)| {
        sample_one(gateway, template, config, &questions[qi], &prompts[qi], sample_index, seed)
    });
    let mut out: Vec<Vec<RecitationCandidate>> =
        questions.iter().map(|_| Vec::with_capacity(k as usize)).collect();
    for ((qi, _), cand) in jobs.into_iter().zip(results) {
        out[qi].push(cand);
    }
    Ok(out)
}

fn sample_one(
    gateway: &Gateway,
    template: &RecitationPromptTemplate,
    config: &RecitationConfig,
    question: &SourceQuestion,
    prompt: &str,
    sample_index: u32,
    seed: u64,
) -> RecitationCandidate {
    let request = CompletionRequest {
        prompt: prompt.to_string(),
        temperature: config.temperature,
        max_output_units: config.max_output_units,
        stop_sequences: config.stop_sequences.clone(),
        sample_index,
        seed,
    };
    let provenance = |created_at| Provenance {
        backend_id: gateway.backend_id().to_string(),
        prompt_hash: prompt_hash(prompt),
        temperature: config.temperature,
        sample_index,
        created_at,
    };
    match gateway.complete(&request) {
        Ok(done) => {
            let parse = match parse_recitation_with(
                &done.response.text,
                template,
                config.multiline_answers,
            ) {
                Ok(p) => ParseStatus::Parsed {
                    document: p.document,
                    answer: p.answer,
                },
                Err(reason) => ParseStatus::FormatViolation { reason },
            };
            RecitationCandidate {
                question_id: question.question_id.clone(),
                sample_index,
                raw_completion: done.response.text,
                parse,
                provenance: provenance(done.created_at),
            }
        }
        Err(err) => {
            log::warn!(
                "question {} sample {sample_index}: {err}",
                question.question_id
            );
            let reason = match err {
                GatewayError::Content { .. } => ViolationReason::ContentRefused,
                _ => ViolationReason::BackendError,
            };
            RecitationCandidate {
                question_id: question.question_id.clone(),
                sample_index,
                raw_completion: String::new(),
                parse: ParseStatus::FormatViolation { reason },
                provenance: provenance(gateway.now()),
            }
        }
    }
}
