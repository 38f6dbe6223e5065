mod judge;
mod surface;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use judge::{
    build_attribution_prompt, build_factuality_prompt, factuality_verdict, judge_verdict,
    normalized_yes, Judge, JudgeExemplar, JudgeKind, JudgeLabel, JudgeMarkers, JudgeTemplate,
    LlmJudge,
};
pub use surface::{normalize_answer_surface, surface_form_match};

use crate::corpus::{CounterfactualRecord, FilterVerdict, ScoredCandidate, SourceQuestion};
use crate::gateway::{parallel_map, GatewayError};
use crate::recitation::TemplateError;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("yes and no probabilities are both zero")]
    ZeroMass,
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("candidate refers to unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("candidate {qid}/{sample_index} has no {which} verdict")]
    MissingVerdict {
        qid: String,
        sample_index: u32,
        which: &'static str,
    },
    #[error("invalid filter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep answers that differ from the gold answer.
    #[default]
    Counterfactual,
    /// Keep only surface matches of the gold answer; no factuality judge.
    Factual,
}

impl std::str::FromStr for FilterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "counterfactual" => Ok(Self::Counterfactual),
            "factual" => Ok(Self::Factual),
            other => Err(format!("unknown mode `{other}` (counterfactual|factual)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Candidates with factuality `normalized_yes` at or above this are removed.
    pub factuality_threshold: f64,
    /// Candidates with attribution `normalized_yes` below this are removed.
    pub attribution_threshold: f64,
    pub yes_variants: Vec<String>,
    pub no_variants: Vec<String>,
    pub mode: FilterMode,
    /// Surface matching against every gold alias rather than the first only.
    pub match_aliases: bool,
    /// Ablation switches. A disabled filter keeps everything; judges still
    /// run so scores are recorded.
    pub factuality_filter: bool,
    pub attribution_filter: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            factuality_threshold: 0.5,
            attribution_threshold: 0.5,
            yes_variants: vec!["Yes".into(), " Yes".into()],
            no_variants: vec!["No".into(), " No".into()],
            mode: FilterMode::Counterfactual,
            match_aliases: true,
            factuality_filter: true,
            attribution_filter: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        for (name, t) in [
            ("factuality_threshold", self.factuality_threshold),
            ("attribution_threshold", self.attribution_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(FilterError::Config(format!("{name} {t} not in (0, 1)")));
            }
        }
        if self.yes_variants.is_empty() || self.no_variants.is_empty() {
            return Err(FilterError::Config("yes/no variant lists must be non-empty".into()));
        }
        let all: Vec<&String> = self.yes_variants.iter().chain(&self.no_variants).collect();
        for (i, v) in all.iter().enumerate() {
            if v.is_empty() || all[i + 1..].contains(v) {
                return Err(FilterError::Config(format!("variant {v:?} is empty or repeated")));
            }
        }
        Ok(())
    }
}

/// Survivors of a judge stage plus the number of candidates dropped because
/// their verdict could not be computed.
#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub kept: Vec<ScoredCandidate>,
    pub verdict_errors: u64,
}

fn index(questions: &[SourceQuestion]) -> HashMap<&str, &SourceQuestion> {
    questions.iter().map(|q| (q.question_id.as_str(), q)).collect()
}

fn lookup<'a>(
    idx: &HashMap<&str, &'a SourceQuestion>,
    qid: &str,
) -> Result<&'a SourceQuestion, FilterError> {
    idx.get(qid)
        .copied()
        .ok_or_else(|| FilterError::UnknownQuestion(qid.to_string()))
}

/// Sets `surface_match` on every candidate.
pub fn mark_surface_matches(
    candidates: &mut [ScoredCandidate],
    questions: &[SourceQuestion],
    match_aliases: bool,
) -> Result<(), FilterError> {
    let idx = index(questions);
    for c in candidates.iter_mut() {
        let q = lookup(&idx, &c.question_id)?;
        let golds = if match_aliases {
            &q.gold_answers[..]
        } else {
            &q.gold_answers[..1]
        };
        c.surface_match = surface_form_match(&c.answer, golds);
    }
    Ok(())
}

/// Counterfactual mode drops surface matches, factual mode keeps only them.
/// With the factuality filter disabled in counterfactual mode nothing is dropped.
pub fn surface_prefilter(candidates: Vec<ScoredCandidate>, config: &FilterConfig) -> Vec<ScoredCandidate> {
    match config.mode {
        FilterMode::Counterfactual if !config.factuality_filter => candidates,
        FilterMode::Counterfactual => candidates.into_iter().filter(|c| !c.surface_match).collect(),
        FilterMode::Factual => candidates.into_iter().filter(|c| c.surface_match).collect(),
    }
}

/// Capability errors abort the stage, as does a stage in which every
/// request failed at the transport level. Anything else drops the candidate.
fn judge_stage<F>(
    judge: &dyn Judge,
    candidates: Vec<ScoredCandidate>,
    run: F,
    keep: impl Fn(&FilterVerdict) -> bool,
    stage: &str,
) -> Result<StageOutcome, FilterError>
where
    F: Fn(&ScoredCandidate) -> Result<FilterVerdict, FilterError> + Sync,
{
    let results = parallel_map(&candidates, judge.parallelism(), |c| run(c));
    let mut out = StageOutcome::default();
    let mut transport_failures = 0usize;
    let mut last_transport = None;
    let total = candidates.len();
    for (mut cand, result) in candidates.into_iter().zip(results) {
        match result {
            Ok(v) => {
                let kept = keep(&v);
                if stage == "factuality" {
                    cand.factuality = Some(v);
                } else {
                    cand.attribution = Some(v);
                }
                if kept {
                    out.kept.push(cand);
                }
            }
            Err(FilterError::Gateway(e @ GatewayError::Capability { .. })) => {
                return Err(FilterError::Gateway(e));
            }
            Err(e) => {
                log::warn!(
                    "{stage} verdict for {}/{} failed: {e}",
                    cand.question_id,
                    cand.sample_index
                );
                if let FilterError::Gateway(GatewayError::Transport { .. }) = e {
                    transport_failures += 1;
                    last_transport = Some(e);
                }
                out.verdict_errors += 1;
            }
        }
    }
    if total > 0 && transport_failures == total {
        return Err(last_transport.expect("at least one transport failure"));
    }
    Ok(out)
}

/// Runs the factuality judge on candidates that passed the surface
/// prefilter and removes those judged the same answer as the gold.
/// Factual mode skips the judge entirely.
pub fn apply_factuality_filter(
    judge: &dyn Judge,
    questions: &[SourceQuestion],
    candidates: Vec<ScoredCandidate>,
    config: &FilterConfig,
) -> Result<StageOutcome, FilterError> {
    if config.mode == FilterMode::Factual {
        return Ok(StageOutcome {
            kept: candidates,
            verdict_errors: 0,
        });
    }
    let idx = index(questions);
    for c in &candidates {
        lookup(&idx, &c.question_id)?;
    }
    let threshold = config.factuality_threshold;
    let enabled = config.factuality_filter;
    judge_stage(
        judge,
        candidates,
        |c| judge.factuality(idx[c.question_id.as_str()], &c.answer),
        |v| !enabled || v.normalized_yes < threshold,
        "factuality",
    )
}

/// Removes candidates whose answer is not grounded in their own document.
/// A score exactly at the threshold is kept.
pub fn apply_attribution_filter(
    judge: &dyn Judge,
    questions: &[SourceQuestion],
    candidates: Vec<ScoredCandidate>,
    config: &FilterConfig,
) -> Result<StageOutcome, FilterError> {
    let idx = index(questions);
    for c in &candidates {
        lookup(&idx, &c.question_id)?;
    }
    let threshold = config.attribution_threshold;
    let enabled = config.attribution_filter;
    judge_stage(
        judge,
        candidates,
        |c| judge.attribution(idx[c.question_id.as_str()], &c.document, &c.answer),
        |v| !enabled || v.normalized_yes >= threshold,
        "attribution",
    )
}

fn rank(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    let score = |c: &ScoredCandidate| c.attribution.as_ref().map_or(f64::NEG_INFINITY, |v| v.normalized_yes);
    score(b)
        .total_cmp(&score(a))
        .then(a.sample_index.cmp(&b.sample_index))
        .then_with(|| a.answer.cmp(&b.answer))
        .then_with(|| a.provenance.backend_id.cmp(&b.provenance.backend_id))
}

/// One record per question that still has candidates: the highest
/// attribution score, ties to the lowest sample index, then the
/// lexicographically smallest answer. Records come out ordered by qid.
///
/// Candidates without a factuality verdict (factual mode) get a
/// factuality score of 1.0.
pub fn select_best_per_question(
    candidates: &[ScoredCandidate],
    questions: &[SourceQuestion],
) -> Result<Vec<CounterfactualRecord>, FilterError> {
    let idx = index(questions);
    let mut groups: BTreeMap<&str, Vec<&ScoredCandidate>> = BTreeMap::new();
    for c in candidates {
        if c.attribution.is_none() {
            return Err(FilterError::MissingVerdict {
                qid: c.question_id.clone(),
                sample_index: c.sample_index,
                which: "attribution",
            });
        }
        groups.entry(c.question_id.as_str()).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|(qid, group)| {
            let q = lookup(&idx, qid)?;
            let best = group
                .into_iter()
                .min_by(|a, b| rank(a, b))
                .expect("groups are non-empty");
            Ok(CounterfactualRecord {
                question_id: best.question_id.clone(),
                question_text: q.question_text.clone(),
                document: best.document.clone(),
                answer: best.answer.clone(),
                original_gold_answer: q.canonical_gold().to_string(),
                attribution_score: best.attribution.as_ref().map_or(0.0, |v| v.normalized_yes),
                factuality_score: best.factuality.as_ref().map_or(1.0, |v| v.normalized_yes),
                provenance: best.provenance.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use chrono::{TimeZone, Utc};
    use std::sync::Mutex;

    fn question(qid: &str, golds: &[&str]) -> SourceQuestion {
        SourceQuestion {
            question_id: qid.into(),
            question_text: format!("question {qid}?"),
            gold_answers: golds.iter().map(|s| s.to_string()).collect(),
            source_dataset: "test".into(),
        }
    }

    fn cand(qid: &str, idx: u32, answer: &str) -> ScoredCandidate {
        ScoredCandidate {
            question_id: qid.into(),
            sample_index: idx,
            document: format!("doc about {answer}"),
            answer: answer.into(),
            provenance: Provenance {
                backend_id: "mock".into(),
                prompt_hash: "0".repeat(64),
                temperature: 0.7,
                sample_index: idx,
                created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            },
            surface_match: false,
            factuality: None,
            attribution: None,
        }
    }

    fn verdict(y: f64) -> FilterVerdict {
        FilterVerdict {
            p_yes_raw: y,
            p_no_raw: 1.0 - y,
            normalized_yes: y,
            token_probs: Default::default(),
        }
    }

    /// Scores by answer text.
    struct TableJudge {
        factuality: HashMap<String, f64>,
        attribution: HashMap<String, f64>,
        calls: Mutex<Vec<String>>,
    }

    impl TableJudge {
        fn new(f: &[(&str, f64)], a: &[(&str, f64)]) -> Self {
            Self {
                factuality: f.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                attribution: a.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                calls: Mutex::new(Vec::new()),
            }
        }
    }

    impl Judge for TableJudge {
        fn factuality(&self, _q: &SourceQuestion, answer: &str) -> Result<FilterVerdict, FilterError> {
            self.calls.lock().unwrap().push(format!("f:{answer}"));
            self.factuality.get(answer).map(|y| verdict(*y)).ok_or(FilterError::ZeroMass)
        }
        fn attribution(&self, _q: &SourceQuestion, _d: &str, answer: &str) -> Result<FilterVerdict, FilterError> {
            self.calls.lock().unwrap().push(format!("a:{answer}"));
            self.attribution.get(answer).map(|y| verdict(*y)).ok_or(FilterError::ZeroMass)
        }
    }

    #[test]
    fn surface_prefilter_removes_case_variant_of_gold() {
        let qs = [question("q", &["Paris"])];
        let mut cs = vec![cand("q", 0, "paris"), cand("q", 1, "Lyon")];
        mark_surface_matches(&mut cs, &qs, true).unwrap();
        let kept = surface_prefilter(cs, &FilterConfig::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].answer, "Lyon");
    }

    #[test]
    fn alias_matching_can_be_restricted() {
        let qs = [question("q", &["Froghopper", "Spittlebugs"])];
        let mut cs = vec![cand("q", 0, "spittlebugs")];
        mark_surface_matches(&mut cs, &qs, false).unwrap();
        assert!(!cs[0].surface_match);
        mark_surface_matches(&mut cs, &qs, true).unwrap();
        assert!(cs[0].surface_match);
    }

    #[test]
    fn factuality_threshold_boundary_removes_at_half() {
        let qs = [question("q", &["gold"])];
        let judge = TableJudge::new(&[("a", 0.5), ("b", 0.4999), ("c", 0.947), ("d", 0.125)], &[]);
        let cs = ["a", "b", "c", "d"].iter().enumerate().map(|(i, a)| cand("q", i as u32, a)).collect();
        let out = apply_factuality_filter(&judge, &qs, cs, &FilterConfig::default()).unwrap();
        let kept: Vec<_> = out.kept.iter().map(|c| c.answer.as_str()).collect();
        assert_eq!(kept, ["b", "d"]);
        assert_eq!(out.verdict_errors, 0);
    }

    #[test]
    fn attribution_threshold_boundary_keeps_at_half() {
        let qs = [question("q", &["gold"])];
        let judge = TableJudge::new(&[], &[("a", 0.5), ("b", 0.4999), ("c", 0.88), ("d", 0.12)]);
        let cs = ["a", "b", "c", "d"].iter().enumerate().map(|(i, a)| cand("q", i as u32, a)).collect();
        let out = apply_attribution_filter(&judge, &qs, cs, &FilterConfig::default()).unwrap();
        let kept: Vec<_> = out.kept.iter().map(|c| c.answer.as_str()).collect();
        assert_eq!(kept, ["a", "c"]);
    }

    #[test]
    fn verdict_errors_drop_and_count() {
        let qs = [question("q", &["gold"])];
        let judge = TableJudge::new(&[("a", 0.1)], &[]);
        let cs = vec![cand("q", 0, "a"), cand("q", 1, "unknown")];
        let out = apply_factuality_filter(&judge, &qs, cs, &FilterConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.verdict_errors, 1);
    }

    #[test]
    fn factual_mode_skips_factuality_judge() {
        let qs = [question("q", &["Paris"])];
        let judge = TableJudge::new(&[], &[("Paris", 0.9)]);
        let config = FilterConfig {
            mode: FilterMode::Factual,
            ..Default::default()
        };
        let mut cs = vec![cand("q", 0, "paris"), cand("q", 1, "Lyon")];
        mark_surface_matches(&mut cs, &qs, true).unwrap();
        let cs = surface_prefilter(cs, &config);
        let out = apply_factuality_filter(&judge, &qs, cs, &config).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert!(judge.calls.lock().unwrap().is_empty());
    }

    #[test]
    fn disabled_filters_keep_everything_but_record_scores() {
        let qs = [question("q", &["gold"])];
        let judge = TableJudge::new(&[("a", 0.9)], &[("a", 0.1)]);
        let config = FilterConfig {
            factuality_filter: false,
            attribution_filter: false,
            ..Default::default()
        };
        let out = apply_factuality_filter(&judge, &qs, vec![cand("q", 0, "a")], &config).unwrap();
        let out = apply_attribution_filter(&judge, &qs, out.kept, &config).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].factuality.as_ref().unwrap().normalized_yes, 0.9);
        assert_eq!(out.kept[0].attribution.as_ref().unwrap().normalized_yes, 0.1);
    }

    #[test]
    fn selection_picks_max_and_breaks_ties_by_sample_index() {
        let qs = [question("q", &["gold"])];
        let mut a = cand("q", 3, "Mars");
        a.attribution = Some(verdict(0.91));
        let mut b = cand("q", 7, "Venus");
        b.attribution = Some(verdict(0.97));
        let mut c = cand("q", 12, "Jupiter");
        c.attribution = Some(verdict(0.97));
        let out = select_best_per_question(&[a, b, c], &qs).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].answer, "Venus");
        assert_eq!(out[0].attribution_score, 0.97);
    }

    #[test]
    fn selection_tie_on_index_falls_back_to_answer() {
        let qs = [question("q", &["gold"])];
        let mut a = cand("q", 1, "b");
        a.attribution = Some(verdict(0.8));
        let mut b = cand("q", 1, "a");
        b.attribution = Some(verdict(0.8));
        let out = select_best_per_question(&[a, b], &qs).unwrap();
        assert_eq!(out[0].answer, "a");
    }

    #[test]
    fn selection_skips_empty_questions_and_orders_by_qid() {
        let qs = [question("q2", &["g"]), question("q1", &["g"]), question("q3", &["g"])];
        let mut a = cand("q2", 0, "x");
        a.attribution = Some(verdict(0.7));
        let mut b = cand("q1", 0, "y");
        b.attribution = Some(verdict(0.6));
        b.factuality = Some(verdict(0.2));
        let out = select_best_per_question(&[a, b], &qs).unwrap();
        let qids: Vec<_> = out.iter().map(|r| r.question_id.as_str()).collect();
        assert_eq!(qids, ["q1", "q2"]);
        assert_eq!(out[0].factuality_score, 0.2);
        assert_eq!(out[1].factuality_score, 1.0);
        assert_eq!(out[0].original_gold_answer, "g");
    }

    #[test]
    fn config_validation() {
        FilterConfig::default().validate().unwrap();
        let bad = FilterConfig {
            factuality_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let dup = FilterConfig {
            no_variants: vec!["Yes".into()],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
    }
}
