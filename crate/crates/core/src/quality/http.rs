//! Adapter for an NLI service taking `{"premise", "hypothesis"}` and
//! answering `{"entailment", "neutral", "contradiction"}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{NliDistribution, NliQuery, NliScorer, QualityError};
use crate::gateway::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpNliConfig {
    pub id: String,
    /// Full URL the queries are POSTed to.
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> u64 {
    60
}

fn default_inflight() -> usize {
    4
}

pub struct HttpNliScorer {
    config: HttpNliConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl HttpNliScorer {
    pub fn new(config: HttpNliConfig) -> Result<Self, QualityError> {
        if config.endpoint.trim().is_empty() {
            return Err(QualityError::Config("NLI scorer endpoint is empty".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                QualityError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    fn attempt(&self, query: &NliQuery) -> Result<NliDistribution, Failure> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(json!({"premise": query.premise, "hypothesis": query.hypothesis}))
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(format!("malformed response body: {e}"))),
            408 | 429 | 500..=599 => Err(Failure::Retry(format!("HTTP {status}: {text}"))),
            _ => Err(Failure::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

impl NliScorer for HttpNliScorer {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn score(&self, query: &NliQuery) -> Result<NliDistribution, QualityError> {
        let mut attempt = 0;
        loop {
            match self.attempt(query) {
                Ok(d) => return Ok(d),
                Err(Failure::Retry(m)) if attempt < self.config.retry.max_retries => {
                    log::debug!("NLI request retry {attempt}: {m}");
                    std::thread::sleep(self.config.retry.delay(attempt));
                    attempt += 1;
                }
                Err(Failure::Retry(message) | Failure::Fatal(message)) => {
                    return Err(QualityError::Scorer {
                        scorer: self.config.id.clone(),
                        message,
                    })
                }
            }
        }
    }

    fn parallelism(&self) -> usize {
        self.config.max_inflight.max(1)
    }
}
