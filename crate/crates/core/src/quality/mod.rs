mod http;
mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpNliConfig, HttpNliScorer};
pub use mock::{MockNliScorer, NliFixtureEntry};

use crate::corpus::CounterfactualRecord;
use crate::gateway::parallel_map;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("every record failed to score ({skipped} skipped)")]
    NoScores { skipped: usize },
    #[error("scorer `{scorer}` failed: {message}")]
    Scorer { scorer: String, message: String },
    #[error("invalid NLI distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid quality config: {0}")]
    Config(String),
}

/// `document + "\n\n" + question`, taken literally.
pub fn format_premise(document: &str, question: &str) -> Result<String, QualityError> {
    if document.is_empty() {
        return Err(QualityError::EmptyField("document"));
    }
    if question.is_empty() {
        return Err(QualityError::EmptyField("question"));
    }
    Ok(format!("{document}\n\n{question}"))
}

/// `question + "\n" + answer`, taken literally.
pub fn format_hypothesis(question: &str, answer: &str) -> Result<String, QualityError> {
    if question.is_empty() {
        return Err(QualityError::EmptyField("question"));
    }
    if answer.is_empty() {
        return Err(QualityError::EmptyField("answer"));
    }
    Ok(format!("{question}\n{answer}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NliQuery {
    pub premise: String,
    pub hypothesis: String,
}

impl NliQuery {
    pub fn new(premise: String, hypothesis: String) -> Result<Self, QualityError> {
        if premise.is_empty() {
            return Err(QualityError::EmptyField("premise"));
        }
        if hypothesis.is_empty() {
            return Err(QualityError::EmptyField("hypothesis"));
        }
        Ok(Self { premise, hypothesis })
    }

    /// Premise from the record's document and question; hypothesis pairs
    /// the question with `answer`.
    pub fn for_record(record: &CounterfactualRecord, answer: &str) -> Result<Self, QualityError> {
        Self::new(
            format_premise(&record.document, &record.question_text)?,
            format_hypothesis(&record.question_text, answer)?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliDistribution {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

pub const DISTRIBUTION_EPSILON: f64 = 1e-6;

impl NliDistribution {
    pub fn validate(&self) -> Result<(), QualityError> {
        let parts = [self.entailment, self.neutral, self.contradiction];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(QualityError::InvalidDistribution(format!("{self:?} has a value outside [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_EPSILON {
            return Err(QualityError::InvalidDistribution(format!("{self:?} sums to {sum}")));
        }
        Ok(())
    }
}

/// Three-way NLI classifier.
pub trait NliScorer: Sync {
    fn id(&self) -> &str;

    fn score(&self, query: &NliQuery) -> Result<NliDistribution, QualityError>;

    fn parallelism(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Also reports the fraction of examples scoring strictly above `tau`.
    FractionAbove { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub entailment_vs_generated: f64,
    pub contradiction_vs_gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub attribution_mean: f64,
    pub counterfactuality_mean: f64,
    pub n: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution_fraction_above: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactuality_fraction_above: Option<f64>,
    pub per_example: Vec<ExampleScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn score_record(record: &CounterfactualRecord, scorer: &dyn NliScorer) -> Result<ExampleScore, QualityError> {
    let generated = NliQuery::for_record(record, &record.answer)?;
    let gold = NliQuery::for_record(record, &record.original_gold_answer)?;
    let e = scorer.score(&generated)?;
    e.validate()?;
    let c = scorer.score(&gold)?;
    c.validate()?;
    Ok(ExampleScore {
        qid: record.question_id.clone(),
        entailment_vs_generated: e.entailment,
        contradiction_vs_gold: c.contradiction,
    })
}

/// Entailment of the generated answer and contradiction of the gold answer,
/// both against the record's own document. Records the scorer fails on are
/// skipped and counted.
pub fn score_dataset(records: &[CounterfactualRecord], scorer: &dyn NliScorer) -> Result<QualityReport, QualityError> {
    score_dataset_with(records, scorer, Aggregation::Mean)
}

pub fn score_dataset_with(
    records: &[CounterfactualRecord],
    scorer: &dyn NliScorer,
    aggregation: Aggregation,
) -> Result<QualityReport, QualityError> {
    if records.is_empty() {
        return Err(QualityError::EmptyDataset);
    }
    if let Aggregation::FractionAbove { tau } = aggregation {
        if !(0.0..=1.0).contains(&tau) {
            return Err(QualityError::Config(format!("tau {tau} not in [0, 1]")));
        }
    }
    let results = parallel_map(records, scorer.parallelism(), |r| score_record(r, scorer));
    let mut per_example = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(s) => per_example.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", record.question_id);
                skipped += 1;
            }
        }
    }
    if per_example.is_empty() {
        return Err(QualityError::NoScores { skipped });
    }
    let attribution_mean = mean(per_example.iter().map(|s| s.entailment_vs_generated));
    let counterfactuality_mean = mean(per_example.iter().map(|s| s.contradiction_vs_gold));
    let (tau, attribution_fraction_above, counterfactuality_fraction_above) = match aggregation {
        Aggregation::Mean => (None, None, None),
        Aggregation::FractionAbove { tau } => {
            let frac = |f: fn(&ExampleScore) -> f64| {
                mean(per_example.iter().map(|s| if f(s) > tau { 1.0 } else { 0.0 }))
            };
            (
                Some(tau),
                Some(frac(|s| s.entailment_vs_generated)),
                Some(frac(|s| s.contradiction_vs_gold)),
            )
        }
    };
    Ok(QualityReport {
        attribution_mean,
        counterfactuality_mean,
        n: per_example.len(),
        skipped,
        tau,
        attribution_fraction_above,
        counterfactuality_fraction_above,
        per_example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use chrono::{TimeZone, Utc};
    use std::collections::HashMap;

    fn record(qid: &str, answer: &str) -> CounterfactualRecord {
        CounterfactualRecord {
            question_id: qid.into(),
            question_text: format!("Question {qid}?"),
            document: format!("Document for {qid}."),
            answer: answer.into(),
            original_gold_answer: "gold".into(),
            attribution_score: 0.9,
            factuality_score: 0.1,
            provenance: Provenance {
                backend_id: "mock".into(),
                prompt_hash: "0".repeat(64),
                temperature: 0.7,
                sample_index: 0,
                created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            },
        }
    }

    /// Entailment and contradiction by hypothesis answer line.
    struct ByAnswer(HashMap<String, (f64, f64)>);

    impl NliScorer for ByAnswer {
        fn id(&self) -> &str {
            "by-answer"
        }
        fn score(&self, q: &NliQuery) -> Result<NliDistribution, QualityError> {
            let answer = q.hypothesis.rsplit('\n').next().unwrap();
            let (e, c) = *self.0.get(answer).ok_or_else(|| QualityError::Scorer {
                scorer: "by-answer".into(),
                message: format!("no score for {answer}"),
            })?;
            Ok(NliDistribution {
                entailment: e,
                neutral: 1.0 - e - c,
                contradiction: c,
            })
        }
    }

    fn scorer(pairs: &[(&str, f64, f64)]) -> ByAnswer {
        ByAnswer(pairs.iter().map(|(a, e, c)| (a.to_string(), (*e, *c))).collect())
    }

    #[test]
    fn formatting_examples() {
        assert_eq!(format_premise("D", "Q?").unwrap(), "D\n\nQ?");
        assert_eq!(format_premise("D\n", "Q?").unwrap(), "D\n\n\nQ?");
        assert!(format_premise("D", "").is_err());
        assert_eq!(format_hypothesis("Q?", "Judy Blume").unwrap(), "Q?\nJudy Blume");
        assert!(format_hypothesis("Q?", "").is_err());
        let h = format_hypothesis("Who?\nReally?", "Judy Blume").unwrap();
        assert_eq!(h.rsplit_once('\n').unwrap().1, "Judy Blume");
    }

    #[test]
    fn attribution_mean_of_four() {
        let recs: Vec<_> = ["a", "b", "c", "d"].iter().map(|a| record(a, a)).collect();
        let s = scorer(&[("a", 1.0, 0.0), ("b", 1.0, 0.0), ("c", 0.5, 0.0), ("d", 0.5, 0.0), ("gold", 0.0, 0.5)]);
        let r = score_dataset(&recs, &s).unwrap();
        assert_eq!(r.attribution_mean, 0.75);
        assert_eq!(r.n, 4);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn single_record_counterfactuality() {
        let s = scorer(&[("x", 0.9, 0.0), ("gold", 0.03, 0.87)]);
        let r = score_dataset(&[record("q", "x")], &s).unwrap();
        assert!((r.counterfactuality_mean - 0.87).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(score_dataset(&[], &scorer(&[])), Err(QualityError::EmptyDataset)));
    }

    #[test]
    fn scorer_failures_are_skipped_and_counted() {
        let s = scorer(&[("a", 0.8, 0.0), ("gold", 0.0, 0.6)]);
        let r = score_dataset(&[record("1", "a"), record("2", "missing")], &s).unwrap();
        assert_eq!((r.n, r.skipped), (1, 1));
        let err = score_dataset(&[record("2", "missing")], &s).unwrap_err();
        assert!(matches!(err, QualityError::NoScores { skipped: 1 }));
    }

    #[test]
    fn means_are_permutation_invariant_and_fraction_is_optional() {
        let s = scorer(&[("a", 0.2, 0.0), ("b", 0.9, 0.0), ("c", 0.6, 0.0), ("gold", 0.0, 0.7)]);
        let mut recs = vec![record("1", "a"), record("2", "b"), record("3", "c")];
        let r1 = score_dataset_with(&recs, &s, Aggregation::FractionAbove { tau: 0.5 }).unwrap();
        recs.reverse();
        let r2 = score_dataset(&recs, &s).unwrap();
        assert!((r1.attribution_mean - r2.attribution_mean).abs() < 1e-12);
        assert!((r1.attribution_fraction_above.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(r2.attribution_fraction_above.is_none());
    }

    #[test]
    fn distribution_validation() {
        let ok = NliDistribution {
            entailment: 0.2,
            neutral: 0.3,
            contradiction: 0.5,
        };
        ok.validate().unwrap();
        let bad = NliDistribution { neutral: 0.4, ..ok };
        assert!(bad.validate().is_err());
    }
}
