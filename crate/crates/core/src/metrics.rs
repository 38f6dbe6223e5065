//! Token F1 and exact match in the SQuAD v1 / MRQA style, plus per-dataset
//! and out-of-domain aggregation.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PredictionRecord, SourceQuestion};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction for unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("more than one prediction for question `{0}`")]
    DuplicatePrediction(String),
    #[error("dataset `{0}` is not among the scored datasets")]
    MissingDataset(String),
    #[error("out-of-domain set is empty")]
    EmptyOodSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricNormalizationRules {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub remove_articles: bool,
    /// When off, tokens are split on single spaces and empty tokens are kept.
    pub collapse_whitespace: bool,
}

impl Default for MetricNormalizationRules {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            remove_articles: true,
            collapse_whitespace: true,
        }
    }
}

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// Python's `str.split()` separators: Unicode whitespace plus the ASCII
/// file/group/record/unit separators.
fn is_split_char(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

pub fn normalize_for_metric(s: &str, rules: &MetricNormalizationRules) -> Vec<String> {
    let mut text = if rules.lowercase {
        s.to_lowercase()
    } else {
        s.to_string()
    };
    if rules.strip_punctuation {
        text.retain(|c| !c.is_ascii_punctuation());
    }
    if rules.remove_articles {
        text = ARTICLES.replace_all(&text, " ").into_owned();
    }
    if rules.collapse_whitespace {
        text.split(is_split_char)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    } else if text.is_empty() {
        Vec::new()
    } else {
        text.split(' ').map(str::to_string).collect()
    }
}

/// Multiset-overlap F1 on normalized tokens. Both sides empty scores 1.0,
/// exactly one side empty scores 0.0.
pub fn token_f1(prediction: &str, gold: &str, rules: &MetricNormalizationRules) -> f64 {
    let p = normalize_for_metric(prediction, rules);
    let g = normalize_for_metric(gold, rules);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(prediction: &str, gold: &str, rules: &MetricNormalizationRules) -> bool {
    normalize_for_metric(prediction, rules) == normalize_for_metric(gold, rules)
}

/// F1 and EM on the 0-100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Em {
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub f1: f64,
    pub em: f64,
    pub n: usize,
    /// Questions without a prediction; each scored 0.
    pub missing: usize,
}

/// Scores one dataset. Each question takes its best alias; questions
/// without a prediction score 0.
pub fn score_predictions(
    dataset: &[SourceQuestion],
    predictions: &[PredictionRecord],
    rules: &MetricNormalizationRules,
) -> Result<DatasetScore, MetricError> {
    let known: HashSet<&str> = dataset.iter().map(|q| q.question_id.as_str()).collect();
    let mut by_qid: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if !known.contains(p.question_id.as_str()) {
            return Err(MetricError::UnknownQuestion(p.question_id.clone()));
        }
        if by_qid.insert(&p.question_id, &p.predicted_answer).is_some() {
            return Err(MetricError::DuplicatePrediction(p.question_id.clone()));
        }
    }
    Ok(score_resolved(dataset, &by_qid, rules))
}

fn score_resolved(
    dataset: &[SourceQuestion],
    by_qid: &HashMap<&str, &str>,
    rules: &MetricNormalizationRules,
) -> DatasetScore {
    let (mut f1_sum, mut em_sum, mut missing) = (0.0, 0.0, 0);
    for q in dataset {
        let Some(pred) = by_qid.get(q.question_id.as_str()) else {
            missing += 1;
            continue;
        };
        f1_sum += q
            .gold_answers
            .iter()
            .map(|g| token_f1(pred, g, rules))
            .fold(0.0, f64::max);
        if q.gold_answers.iter().any(|g| exact_match(pred, g, rules)) {
            em_sum += 1.0;
        }
    }
    let n = dataset.len();
    let scale = |s: f64| if n == 0 { 0.0 } else { 100.0 * s / n as f64 };
    DatasetScore {
        f1: scale(f1_sum),
        em: scale(em_sum),
        n,
        missing,
    }
}

/// Unweighted mean of the named datasets' scores.
pub fn aggregate_ood(per_dataset: &IndexMap<String, DatasetScore>, ood_set: &[String]) -> Result<F1Em, MetricError> {
    if ood_set.is_empty() {
        return Err(MetricError::EmptyOodSet);
    }
    let mut f1 = 0.0;
    let mut em = 0.0;
    for name in ood_set {
        let s = per_dataset
            .get(name)
            .ok_or_else(|| MetricError::MissingDataset(name.clone()))?;
        f1 += s.f1;
        em += s.em;
    }
    let k = ood_set.len() as f64;
    Ok(F1Em { f1: f1 / k, em: em / k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodAverage {
    pub datasets: Vec<String>,
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_dataset: IndexMap<String, DatasetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_average: Option<OodAverage>,
}

/// Scores one pool of predictions against several datasets. Every
/// prediction must belong to one of them; each dataset only sees its own
/// questions.
pub fn build_report(
    datasets: &IndexMap<String, Vec<SourceQuestion>>,
    predictions: &[PredictionRecord],
    rules: &MetricNormalizationRules,
    ood_set: &[String],
) -> Result<MetricReport, MetricError> {
    let known: HashSet<&str> = datasets
        .values()
        .flatten()
        .map(|q| q.question_id.as_str())
        .collect();
    let mut by_qid: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if !known.contains(p.question_id.as_str()) {
            return Err(MetricError::UnknownQuestion(p.question_id.clone()));
        }
        if by_qid.insert(&p.question_id, &p.predicted_answer).is_some() {
            return Err(MetricError::DuplicatePrediction(p.question_id.clone()));
        }
    }
    let per_dataset: IndexMap<String, DatasetScore> = datasets
        .iter()
        .map(|(name, qs)| (name.clone(), score_resolved(qs, &by_qid, rules)))
        .collect();
    let ood_average = if ood_set.is_empty() {
        None
    } else {
        let avg = aggregate_ood(&per_dataset, ood_set)?;
        Some(OodAverage {
            datasets: ood_set.to_vec(),
            f1: avg.f1,
            em: avg.em,
        })
    };
    Ok(MetricReport {
        per_dataset,
        ood_average,
    })
}

impl MetricReport {
    /// Aligned text table: one column per dataset, then the OOD average;
    /// rows for F1 and EM.
    pub fn to_table(&self) -> String {
        let mut header = vec![String::new()];
        header.extend(self.per_dataset.keys().cloned());
        let mut f1 = vec!["F1".to_string()];
        let mut em = vec!["EM".to_string()];
        for s in self.per_dataset.values() {
            f1.push(format!("{:.1}", s.f1));
            em.push(format!("{:.1}", s.em));
        }
        if let Some(o) = &self.ood_average {
            header.push("OOD Avg.".into());
            f1.push(format!("{:.1}", o.f1));
            em.push(format!("{:.1}", o.em));
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|i| [&header, &f1, &em].iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        [header, f1, em]
            .iter()
            .map(|row| {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                cells.join("  ").trim_end().to_string() + "\n"
            })
            .collect()
    }
}
