use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::corpus::SourceFormat;
use crate::filters::{FilterConfig, FilterMode};
use crate::gateway::{Backend, HttpBackend, HttpBackendConfig, MockBackend, RetryPolicy, UnknownPrompt};
use crate::quality::{Aggregation, HttpNliConfig, HttpNliScorer, MockNliScorer, NliDistribution, NliScorer};
use crate::recitation::RecitationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: SourceFormat,
}

fn default_format() -> SourceFormat {
    SourceFormat::TriviaqaMrqa
}

/// Template files; any left out uses the bundled default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatePaths {
    pub recitation: Option<PathBuf>,
    pub factuality: Option<PathBuf>,
    pub attribution: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        id: String,
        fixture: PathBuf,
        #[serde(default = "strict")]
        unknown: UnknownPrompt,
    },
    Http(HttpBackendConfig),
}

fn strict() -> UnknownPrompt {
    UnknownPrompt::Error
}

impl BackendConfig {
    pub fn id(&self) -> &str {
        match self {
            BackendConfig::Mock { id, .. } => id,
            BackendConfig::Http(c) => &c.id,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Arc<dyn Backend>, PipelineError> {
        let backend: Arc<dyn Backend> = match self {
            BackendConfig::Mock { id, fixture, unknown } => Arc::new(
                MockBackend::from_fixture_file(id.clone(), fixture, seed, unknown.clone())
                    .map_err(|e| PipelineError::Config(format!("mock backend `{id}`: {e}")))?,
            ),
            BackendConfig::Http(c) => Arc::new(
                HttpBackend::new(c.clone())
                    .map_err(|e| PipelineError::Config(format!("backend `{}`: {e}", c.id)))?,
            ),
        };
        Ok(backend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    Mock {
        fixture: PathBuf,
        #[serde(default)]
        fallback: Option<NliDistribution>,
    },
    Http(HttpNliConfig),
}

impl ScorerConfig {
    pub fn build(&self) -> Result<Box<dyn NliScorer>, PipelineError> {
        Ok(match self {
            ScorerConfig::Mock { fixture, fallback } => {
                let mut s = MockNliScorer::load(fixture).map_err(|e| PipelineError::Config(e.to_string()))?;
                if let Some(d) = fallback {
                    s = s.with_fallback(*d);
                }
                Box::new(s)
            }
            ScorerConfig::Http(c) => {
                Box::new(HttpNliScorer::new(c.clone()).map_err(|e| PipelineError::Config(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualitySection {
    pub scorer: Option<ScorerConfig>,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Concurrency {
    pub max_inflight: usize,
    pub requests_per_second: Option<u32>,
}

impl Default for Concurrency {
    fn default() -> Self {
        Self {
            max_inflight: 8,
            requests_per_second: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source: SourceConfig,
    #[serde(default)]
    pub templates: TemplatePaths,
    pub generator: BackendConfig,
    /// Defaults to the generator backend.
    #[serde(default)]
    pub judge: Option<BackendConfig>,
    #[serde(default)]
    pub recitation: RecitationConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub concurrency: Concurrency,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Stamps fresh responses with this instant instead of the wall clock.
    #[serde(default)]
    pub fixed_timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub quality: QualitySection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub mode: Option<FilterMode>,
    pub cache_dir: Option<PathBuf>,
    pub max_inflight: Option<usize>,
}

/// Replaces `${NAME}` in every string value with the environment variable.
pub fn interpolate_env(value: &mut Value) -> Result<(), PipelineError> {
    match value {
        Value::String(s) => *s = interpolate_str(s)?,
        Value::Array(items) => {
            for v in items {
                interpolate_env(v)?;
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                interpolate_env(v)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn interpolate_str(s: &str) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| PipelineError::Config(format!("unterminated `${{` in {s:?}")))?;
        let name = &after[..end];
        let v = std::env::var(name)
            .map_err(|_| PipelineError::Config(format!("environment variable `{name}` is not set")))?;
        out.push_str(&v);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads JSON, interpolates environment variables and resolves relative
    /// paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("config {}: {e}", path.display())))?;
        interpolate_env(&mut value)?;
        let mut config: Self = serde_json::from_value(value)
            .map_err(|e| PipelineError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.source.path);
        for p in [
            &mut self.templates.recitation,
            &mut self.templates.factuality,
            &mut self.templates.attribution,
            &mut self.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
        for b in [Some(&mut self.generator), self.judge.as_mut()].into_iter().flatten() {
            if let BackendConfig::Mock { fixture, .. } = b {
                resolve(base, fixture);
            }
        }
        if let Some(ScorerConfig::Mock { fixture, .. }) = &mut self.quality.scorer {
            resolve(base, fixture);
        }
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.filter.mode = m;
        }
        if let Some(c) = &o.cache_dir {
            self.cache_dir = Some(c.clone());
        }
        if let Some(n) = o.max_inflight {
            self.concurrency.max_inflight = n;
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn judge_config(&self) -> &BackendConfig {
        self.judge.as_ref().unwrap_or(&self.generator)
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let must_exist = |what: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        must_exist("source", &self.source.path)?;
        for (what, p) in [
            ("recitation template", &self.templates.recitation),
            ("factuality template", &self.templates.factuality),
            ("attribution template", &self.templates.attribution),
        ] {
            if let Some(p) = p {
                must_exist(what, p)?;
            }
        }
        for b in [Some(&self.generator), self.judge.as_ref()].into_iter().flatten() {
            if let BackendConfig::Mock { fixture, .. } = b {
                must_exist("mock fixture", fixture)?;
            }
        }
        self.recitation.validate().map_err(PipelineError::Config)?;
        self.filter
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.concurrency.max_inflight == 0 {
            return Err(PipelineError::Config("max_inflight must be at least 1".into()));
        }
        Ok(())
    }
}
