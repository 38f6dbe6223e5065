//! Stage orchestration over explicit JSONL files in one output directory.

mod config;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    interpolate_env, BackendConfig, Concurrency, ConfigOverrides, PipelineConfig, QualitySection,
    ScorerConfig, SourceConfig, TemplatePaths,
};

use crate::corpus::{
    load_cf_dataset, load_manifest, load_source_dataset, read_jsonl, write_cf_dataset, write_jsonl,
    write_manifest, CorpusError, CounterfactualRecord, DatasetManifest, DatasetRules, QuestionOutcomes,
    RecitationCandidate, ScoredCandidate, SourceFormat, SourceQuestion, Stage, ViolationReason,
};
use crate::filters::{
    apply_attribution_filter, apply_factuality_filter, mark_surface_matches, normalize_answer_surface,
    select_best_per_question, surface_prefilter, FilterError, FilterMode, JudgeKind, JudgeTemplate, LlmJudge,
};
use crate::gateway::{Backend, Clock, DiskCache, Gateway, GatewayError, RateLimiter};
use crate::metrics::{build_report, MetricError, MetricNormalizationRules, MetricReport};
use crate::quality::{score_dataset_with, Aggregation, NliScorer, QualityError, QualityReport};
use crate::recitation::{generate_many, RecitationPromptTemplate, TemplateError};

pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const POST_SURFACE_FILE: &str = "post_surface.jsonl";
pub const POST_FACTUALITY_FILE: &str = "post_factuality.jsonl";
pub const POST_ATTRIBUTION_FILE: &str = "post_attribution.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl PipelineError {
    /// Process exit status: 1 config/usage, 2 data, 3 backend exhaustion.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Backend(_) => 3,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<FilterError> for PipelineError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Gateway(GatewayError::Capability { .. } | GatewayError::Transport { .. }) => {
                PipelineError::Backend(e.to_string())
            }
            FilterError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<QualityError> for PipelineError {
    fn from(e: QualityError) -> Self {
        match e {
            QualityError::Config(_) => PipelineError::Config(e.to_string()),
            QualityError::NoScores { .. } => PipelineError::Backend(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn template_config_error(e: TemplateError) -> PipelineError {
    PipelineError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub questions: usize,
    pub candidates: usize,
    pub parsed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub post_surface: usize,
    pub post_factuality: usize,
    pub post_attribution: usize,
    pub verdict_errors: u64,
}

/// A configured pipeline bound to its generator and judge gateways.
pub struct Pipeline {
    config: PipelineConfig,
    generator: Gateway,
    judge: Gateway,
    recitation_template: RecitationPromptTemplate,
    factuality_template: JudgeTemplate,
    attribution_template: JudgeTemplate,
}

fn sha256_json<T: serde::Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("templates serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl Pipeline {
    /// Validates the config and builds backends from it. A judge section
    /// identical to the generator shares one backend instance.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let generator = config.generator.build(config.seed)?;
        let judge = match &config.judge {
            Some(j) if *j != config.generator => j.build(config.seed)?,
            _ => Arc::clone(&generator),
        };
        Self::with_backends(config, generator, judge)
    }

    /// Uses the given backends in place of the configured ones.
    pub fn with_backends(
        config: PipelineConfig,
        generator: Arc<dyn Backend>,
        judge: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        config.recitation.validate().map_err(PipelineError::Config)?;
        config.filter.validate()?;
        let recitation_template = match &config.templates.recitation {
            Some(p) => RecitationPromptTemplate::load(p).map_err(template_config_error)?,
            None => RecitationPromptTemplate::default(),
        };
        let factuality_template = match &config.templates.factuality {
            Some(p) => JudgeTemplate::load(p, JudgeKind::Factuality).map_err(template_config_error)?,
            None => JudgeTemplate::default_factuality(),
        };
        let attribution_template = match &config.templates.attribution {
            Some(p) => JudgeTemplate::load(p, JudgeKind::Attribution).map_err(template_config_error)?,
            None => JudgeTemplate::default_attribution(),
        };
        let cache_dir = config.cache_dir();
        let clock = config.fixed_timestamp.map_or(Clock::System, Clock::Fixed);
        let gateway = |backend: Arc<dyn Backend>| -> Result<Gateway, PipelineError> {
            let cache = DiskCache::open(&cache_dir).map_err(PipelineError::Config)?;
            Ok(Gateway::new(backend)
                .with_cache(cache)
                .with_limiter(RateLimiter::new(
                    config.concurrency.max_inflight,
                    config.concurrency.requests_per_second,
                ))
                .with_retry(config.retry.clone())
                .with_clock(clock.clone())
                .with_seed(config.seed))
        };
        let generator = gateway(generator)?;
        let judge = gateway(judge)?;
        Ok(Self {
            config,
            generator,
            judge,
            recitation_template,
            factuality_template,
            attribution_template,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.config.output_dir.join(file)
    }

    /// Backend invocations made so far by the generator and judge gateways.
    pub fn backend_calls(&self) -> usize {
        self.generator.backend_calls() + self.judge.backend_calls()
    }

    pub fn load_questions(&self) -> Result<Vec<SourceQuestion>, PipelineError> {
        let qs = load_source_dataset(&self.config.source.path, self.config.source.format)?;
        Ok(qs)
    }

    /// Machine-independent summary of the settings that shape the output.
    fn snapshot(&self) -> serde_json::Value {
        json!({
            "source": self.config.source.path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "source_format": self.config.source.format,
            "generator": self.generator.backend_id(),
            "judge": self.judge.backend_id(),
            "recitation": self.config.recitation,
            "filter": self.config.filter,
            "templates": {
                "recitation": sha256_json(&self.recitation_template),
                "factuality": sha256_json(&self.factuality_template),
                "attribution": sha256_json(&self.attribution_template),
            },
        })
    }

    fn fresh_manifest(&self) -> DatasetManifest {
        DatasetManifest::new(self.config.seed, self.config.recitation.k_samples, self.snapshot())
    }

    fn load_or_fresh_manifest(&self) -> Result<DatasetManifest, PipelineError> {
        let p = self.path(MANIFEST_FILE);
        if p.is_file() {
            Ok(load_manifest(p)?)
        } else {
            Ok(self.fresh_manifest())
        }
    }

    fn clear_from(manifest: &mut DatasetManifest, first: Stage) {
        manifest.stage_counts.retain(|s, _| *s < first);
        manifest.verdict_errors.retain(|s, _| *s < first);
        manifest.outcomes = None;
        manifest.recompute_retention();
    }

    /// Samples k recitations per question and writes `candidates.jsonl`.
    pub fn run_generate(&self) -> Result<GenerateSummary, PipelineError> {
        let questions = self.load_questions()?;
        for q in &questions {
            self.recitation_template
                .build_prompt(q)
                .map_err(|e| PipelineError::Data(format!("question {}: {e}", q.question_id)))?;
        }
        let per_question = generate_many(
            &self.generator,
            &self.recitation_template,
            &self.config.recitation,
            &questions,
            self.config.seed,
        )
        .map_err(|e| PipelineError::Data(e.to_string()))?;

        let is_backend_failure = |c: &RecitationCandidate| {
            matches!(
                c.violation(),
                Some(ViolationReason::BackendError | ViolationReason::ContentRefused)
            )
        };
        let backend_failed: Vec<String> = questions
            .iter()
            .zip(&per_question)
            .filter(|(_, cs)| !cs.is_empty() && cs.iter().all(is_backend_failure))
            .map(|(q, _)| q.question_id.clone())
            .collect();
        let all: Vec<RecitationCandidate> = per_question.iter().flatten().cloned().collect();
        if !all.is_empty()
            && all
                .iter()
                .all(|c| c.violation() == Some(ViolationReason::BackendError))
        {
            return Err(PipelineError::Backend(format!(
                "every one of {} generation requests to `{}` failed",
                all.len(),
                self.generator.backend_id()
            )));
        }
        write_jsonl(self.path(CANDIDATES_FILE), &all)?;

        let parsed = all.iter().filter(|c| c.parsed().is_some()).count();
        let unique: Vec<usize> = per_question
            .iter()
            .map(|cs| {
                cs.iter()
                    .filter_map(|c| c.parsed().map(|(_, a)| normalize_answer_surface(a)))
                    .collect::<HashSet<_>>()
                    .len()
            })
            .filter(|n| *n > 0)
            .collect();

        let mut m = self.fresh_manifest();
        m.set_count(Stage::QuestionsIn, questions.len() as u64);
        m.set_count(Stage::RawSamples, all.len() as u64);
        m.set_count(Stage::Parsed, parsed as u64);
        m.backend_failed_questions = backend_failed;
        m.unique_answers_per_question =
            (!unique.is_empty()).then(|| unique.iter().sum::<usize>() as f64 / unique.len() as f64);
        write_manifest(&m, self.path(MANIFEST_FILE))?;
        Ok(GenerateSummary {
            questions: questions.len(),
            candidates: all.len(),
            parsed,
        })
    }

    fn llm_judge(&self) -> LlmJudge<'_> {
        LlmJudge {
            gateway: &self.judge,
            factuality_template: &self.factuality_template,
            attribution_template: &self.attribution_template,
            yes_variants: self.config.filter.yes_variants.clone(),
            no_variants: self.config.filter.no_variants.clone(),
        }
    }

    /// Surface prefilter, factuality judge and attribution judge over
    /// `candidates.jsonl`, writing one file per stage.
    pub fn run_filter(&self) -> Result<FilterSummary, PipelineError> {
        let questions = self.load_questions()?;
        let candidates: Vec<RecitationCandidate> = read_jsonl(self.path(CANDIDATES_FILE))?;
        let known: HashSet<&str> = questions.iter().map(|q| q.question_id.as_str()).collect();
        if let Some(c) = candidates.iter().find(|c| !known.contains(c.question_id.as_str())) {
            return Err(PipelineError::Data(format!(
                "candidate for unknown question `{}`",
                c.question_id
            )));
        }
        let mut scored: Vec<ScoredCandidate> = candidates.iter().filter_map(ScoredCandidate::from_candidate).collect();
        let filter = &self.config.filter;
        mark_surface_matches(&mut scored, &questions, filter.match_aliases)?;
        let post_surface = surface_prefilter(scored, filter);
        write_jsonl(self.path(POST_SURFACE_FILE), &post_surface)?;

        let judge = self.llm_judge();
        let fact = apply_factuality_filter(&judge, &questions, post_surface.clone(), filter)?;
        write_jsonl(self.path(POST_FACTUALITY_FILE), &fact.kept)?;
        let attr = apply_attribution_filter(&judge, &questions, fact.kept.clone(), filter)?;
        write_jsonl(self.path(POST_ATTRIBUTION_FILE), &attr.kept)?;

        let mut m = self.load_or_fresh_manifest()?;
        Self::clear_from(&mut m, Stage::PostSurface);
        m.set_count(Stage::QuestionsIn, questions.len() as u64);
        m.set_count(Stage::RawSamples, candidates.len() as u64);
        m.set_count(
            Stage::Parsed,
            candidates.iter().filter(|c| c.parsed().is_some()).count() as u64,
        );
        m.set_count(Stage::PostSurface, post_surface.len() as u64);
        m.set_count(Stage::PostFactuality, fact.kept.len() as u64);
        m.set_count(Stage::PostAttribution, attr.kept.len() as u64);
        m.verdict_errors.insert(Stage::PostFactuality, fact.verdict_errors);
        m.verdict_errors.insert(Stage::PostAttribution, attr.verdict_errors);
        m.config_snapshot = self.snapshot();
        write_manifest(&m, self.path(MANIFEST_FILE))?;
        Ok(FilterSummary {
            post_surface: post_surface.len(),
            post_factuality: fact.kept.len(),
            post_attribution: attr.kept.len(),
            verdict_errors: fact.verdict_errors + attr.verdict_errors,
        })
    }

    fn dataset_rules(&self) -> DatasetRules {
        let f = &self.config.filter;
        DatasetRules {
            attribution_threshold: f.attribution_filter.then_some(f.attribution_threshold),
            require_counterfactual: f.mode == FilterMode::Counterfactual && f.factuality_filter,
        }
    }

    /// One record per question from `post_attribution.jsonl`, written to
    /// `dataset.jsonl`, plus the final manifest.
    pub fn run_select(&self) -> Result<Vec<CounterfactualRecord>, PipelineError> {
        let questions = self.load_questions()?;
        let survivors: Vec<ScoredCandidate> = read_jsonl(self.path(POST_ATTRIBUTION_FILE))?;
        let records = select_best_per_question(&survivors, &questions)?;
        write_cf_dataset(&records, self.path(DATASET_FILE), &self.dataset_rules())?;

        let candidates: Vec<RecitationCandidate> = read_jsonl(self.path(CANDIDATES_FILE))?;
        let mut parsed_per_q: HashMap<&str, usize> = HashMap::new();
        for c in &candidates {
            if c.parsed().is_some() {
                *parsed_per_q.entry(c.question_id.as_str()).or_default() += 1;
            }
        }
        let all_parse_failures = questions
            .iter()
            .filter(|q| !parsed_per_q.contains_key(q.question_id.as_str()))
            .count() as u64;
        let selected = records.len() as u64;
        let mut m = self.load_or_fresh_manifest()?;
        Self::clear_from(&mut m, Stage::Selected);
        m.set_count(Stage::Selected, selected);
        m.outcomes = Some(QuestionOutcomes {
            selected,
            no_survivors: questions.len() as u64 - selected - all_parse_failures,
            all_parse_failures,
        });
        write_manifest(&m, self.path(MANIFEST_FILE))?;
        Ok(records)
    }

    /// generate, filter, select.
    pub fn run_pipeline(&self) -> Result<Vec<CounterfactualRecord>, PipelineError> {
        self.run_generate()?;
        self.run_filter()?;
        self.run_select()
    }
}

/// Scores a dataset file with the NLI scorer and writes the report as JSON.
pub fn run_quality(
    dataset: &Path,
    scorer: &dyn NliScorer,
    aggregation: Aggregation,
    out: Option<&Path>,
) -> Result<QualityReport, PipelineError> {
    let records = load_cf_dataset(dataset)?;
    let report = score_dataset_with(&records, scorer, aggregation)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// An evaluation dataset file, optionally renamed.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub name: Option<String>,
    pub path: PathBuf,
    pub format: SourceFormat,
}

/// Scores pooled prediction files against several datasets. A dataset is
/// named explicitly, by its MRQA header, or by its file stem.
pub fn run_score(
    datasets: &[EvalDataset],
    predictions: &[PathBuf],
    ood: &[String],
    rules: &MetricNormalizationRules,
    out: Option<&Path>,
) -> Result<MetricReport, PipelineError> {
    let mut loaded = indexmap::IndexMap::new();
    for d in datasets {
        let qs = load_source_dataset(&d.path, d.format)?;
        let name = match &d.name {
            Some(n) => n.clone(),
            None => qs.first().map(|q| q.source_dataset.clone()).unwrap_or_else(|| {
                d.path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
        };
        if loaded.insert(name.clone(), qs).is_some() {
            return Err(PipelineError::Config(format!("dataset name `{name}` given twice")));
        }
    }
    let mut preds = Vec::new();
    for p in predictions {
        preds.extend(read_jsonl(p)?);
    }
    let report = build_report(&loaded, &preds, rules, ood)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CorpusError::from)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Human-readable rendering of a manifest.
pub fn format_stats(m: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("seed {}  samples/question {}\n", m.seed, m.samples_per_question));
    for s in Stage::ALL {
        let Some(n) = m.count(s) else { continue };
        let rate = m
            .retention_rates
            .get(&s)
            .map(|r| format!("  ({:.1}% kept)", r * 100.0))
            .unwrap_or_default();
        let errs = m
            .verdict_errors
            .get(&s)
            .filter(|e| **e > 0)
            .map(|e| format!("  [{e} verdict errors]"))
            .unwrap_or_default();
        out.push_str(&format!("{:<17}{n:>8}{rate}{errs}\n", s.as_str()));
    }
    if let Some(o) = &m.outcomes {
        out.push_str(&format!(
            "outcomes: {} selected, {} without survivors, {} all parse failures\n",
            o.selected, o.no_survivors, o.all_parse_failures
        ));
    }
    if let Some(u) = m.unique_answers_per_question {
        out.push_str(&format!("unique answers per question: {u:.2}\n"));
    }
    if !m.backend_failed_questions.is_empty() {
        out.push_str(&format!(
            "questions lost to backend failures: {}\n",
            m.backend_failed_questions.join(", ")
        ));
    }
    out
}
