//! Python bindings. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use har_core::corpus::{SourceFormat, SourceQuestion};
use har_core::filters::{self, FilterMode, JudgeTemplate};
use har_core::metrics::{self, DatasetScore, MetricNormalizationRules};
use har_core::pipeline::{self, ConfigOverrides, EvalDataset, PipelineConfig, PipelineError};
use har_core::quality::{self, Aggregation, MockNliScorer};
use har_core::recitation::{self, RecitationPromptTemplate};
use indexmap::IndexMap;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(har, HarError, PyException, "Base class for pipeline failures.");
create_exception!(har, ConfigError, HarError, "Bad configuration or usage.");
create_exception!(har, DataError, HarError, "Malformed or inconsistent data.");
create_exception!(har, BackendError, HarError, "Backend or transport exhaustion.");

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Config(m) => ConfigError::new_err(m),
        PipelineError::Data(m) => DataError::new_err(m),
        PipelineError::Backend(m) => BackendError::new_err(m),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// serde value -> Python object, via the json module.
fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn rules() -> MetricNormalizationRules {
    MetricNormalizationRules::default()
}

/// SQuAD-style normalized tokens.
#[pyfunction]
fn normalize_for_metric(text: &str) -> Vec<String> {
    metrics::normalize_for_metric(text, &rules())
}

/// Token F1 in [0, 1] against one gold answer.
#[pyfunction]
fn token_f1(prediction: &str, gold: &str) -> f64 {
    metrics::token_f1(prediction, gold, &rules())
}

#[pyfunction]
fn exact_match(prediction: &str, gold: &str) -> bool {
    metrics::exact_match(prediction, gold, &rules())
}

/// Unweighted mean over the named datasets of `{name: (f1, em)}` cells.
#[pyfunction]
fn aggregate_ood(per_dataset: IndexMap<String, (f64, f64)>, ood: Vec<String>) -> PyResult<(f64, f64)> {
    let cells: IndexMap<String, DatasetScore> = per_dataset
        .into_iter()
        .map(|(k, (f1, em))| {
            (
                k,
                DatasetScore {
                    f1,
                    em,
                    n: 0,
                    missing: 0,
                },
            )
        })
        .collect();
    let avg = metrics::aggregate_ood(&cells, &ood).map_err(value_err)?;
    Ok((avg.f1, avg.em))
}

#[pyfunction]
fn normalize_answer_surface(answer: &str) -> String {
    filters::normalize_answer_surface(answer)
}

#[pyfunction]
fn surface_form_match(answer: &str, gold_answers: Vec<String>) -> bool {
    filters::surface_form_match(answer, &gold_answers)
}

#[pyfunction]
fn normalized_yes(p_yes: f64, p_no: f64) -> PyResult<f64> {
    filters::normalized_yes(p_yes, p_no).map_err(value_err)
}

/// Few-shot recitation prompt with the bundled template.
#[pyfunction]
fn build_recitation_prompt(question: &str) -> PyResult<String> {
    let q = SourceQuestion {
        question_id: String::new(),
        question_text: question.into(),
        gold_answers: Vec::new(),
        source_dataset: String::new(),
    };
    RecitationPromptTemplate::default().build_prompt(&q).map_err(value_err)
}

/// `(document, answer)`; raises ValueError naming the violation.
#[pyfunction]
fn parse_recitation(raw_completion: &str) -> PyResult<(String, String)> {
    let p = recitation::parse_recitation(raw_completion, &RecitationPromptTemplate::default())
        .map_err(value_err)?;
    Ok((p.document, p.answer))
}

#[pyfunction]
fn build_factuality_prompt(question: &str, generated_answer: &str, gold_answer: &str) -> PyResult<String> {
    filters::build_factuality_prompt(&JudgeTemplate::default_factuality(), question, generated_answer, gold_answer)
        .map_err(value_err)
}

#[pyfunction]
fn build_attribution_prompt(question: &str, document: &str, answer: &str) -> PyResult<String> {
    filters::build_attribution_prompt(&JudgeTemplate::default_attribution(), question, document, answer)
        .map_err(value_err)
}

#[pyfunction]
fn format_premise(document: &str, question: &str) -> PyResult<String> {
    quality::format_premise(document, question).map_err(value_err)
}

#[pyfunction]
fn format_hypothesis(question: &str, answer: &str) -> PyResult<String> {
    quality::format_hypothesis(question, answer).map_err(value_err)
}

/// A configured pipeline. Stage outputs land in the config's output directory.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config_path, *, seed=None, mode=None, cache_dir=None, max_inflight=None))]
    fn new(
        config_path: PathBuf,
        seed: Option<u64>,
        mode: Option<&str>,
        cache_dir: Option<PathBuf>,
        max_inflight: Option<usize>,
    ) -> PyResult<Self> {
        let mut config = PipelineConfig::load(config_path).map_err(pipeline_err)?;
        let mode = mode
            .map(|m| m.parse::<FilterMode>())
            .transpose()
            .map_err(ConfigError::new_err)?;
        config.apply(&ConfigOverrides {
            seed,
            mode,
            cache_dir,
            max_inflight,
        });
        let inner = pipeline::Pipeline::from_config(config).map_err(pipeline_err)?;
        Ok(Self { inner })
    }

    /// Returns `(questions, candidates, parsed)`.
    fn generate(&self, py: Python<'_>) -> PyResult<(usize, usize, usize)> {
        let s = py.detach(|| self.inner.run_generate()).map_err(pipeline_err)?;
        Ok((s.questions, s.candidates, s.parsed))
    }

    /// Returns `(post_surface, post_factuality, post_attribution)`.
    fn filter(&self, py: Python<'_>) -> PyResult<(usize, usize, usize)> {
        let s = py.detach(|| self.inner.run_filter()).map_err(pipeline_err)?;
        Ok((s.post_surface, s.post_factuality, s.post_attribution))
    }

    /// Selected records as dicts.
    fn select(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let r = py.detach(|| self.inner.run_select()).map_err(pipeline_err)?;
        to_py(py, &r)
    }

    /// generate, filter and select; returns the selected records.
    fn run(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let r = py.detach(|| self.inner.run_pipeline()).map_err(pipeline_err)?;
        to_py(py, &r)
    }

    fn output_path(&self, file: &str) -> PathBuf {
        self.inner.path(file)
    }

    #[getter]
    fn backend_calls(&self) -> usize {
        self.inner.backend_calls()
    }
}

/// Quality report for a dataset file, scored with a mock NLI fixture.
#[pyfunction]
#[pyo3(signature = (dataset, nli_fixture, fraction_above=None))]
fn quality_report(
    py: Python<'_>,
    dataset: PathBuf,
    nli_fixture: PathBuf,
    fraction_above: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let scorer = MockNliScorer::load(&nli_fixture).map_err(|e| ConfigError::new_err(e.to_string()))?;
    let aggregation = fraction_above.map_or(Aggregation::Mean, |tau| Aggregation::FractionAbove { tau });
    let r = pipeline::run_quality(&dataset, &scorer, aggregation, None).map_err(pipeline_err)?;
    to_py(py, &r)
}

/// Metric report for prediction files against `{name: path}` datasets.
#[pyfunction]
#[pyo3(signature = (datasets, predictions, ood=Vec::new(), format="triviaqa-mrqa"))]
fn score(
    py: Python<'_>,
    datasets: IndexMap<String, PathBuf>,
    predictions: Vec<PathBuf>,
    ood: Vec<String>,
    format: &str,
) -> PyResult<Py<PyAny>> {
    let format: SourceFormat = format.parse().map_err(ConfigError::new_err)?;
    let datasets: Vec<EvalDataset> = datasets
        .into_iter()
        .map(|(name, path)| EvalDataset {
            name: Some(name),
            path,
            format,
        })
        .collect();
    let r = pipeline::run_score(&datasets, &predictions, &ood, &rules(), None).map_err(pipeline_err)?;
    to_py(py, &r)
}

#[pymodule]
fn har(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("HarError", py.get_type::<HarError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("BackendError", py.get_type::<BackendError>())?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(normalize_for_metric, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_ood, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer_surface, m)?)?;
    m.add_function(wrap_pyfunction!(surface_form_match, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_yes, m)?)?;
    m.add_function(wrap_pyfunction!(build_recitation_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_recitation, m)?)?;
    m.add_function(wrap_pyfunction!(build_factuality_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(build_attribution_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(format_premise, m)?)?;
    m.add_function(wrap_pyfunction!(format_hypothesis, m)?)?;
    m.add_function(wrap_pyfunction!(quality_report, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
