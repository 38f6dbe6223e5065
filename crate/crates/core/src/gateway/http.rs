//! Adapter for services speaking the OpenAI-style `/completions` protocol.
//!
//! Next-token probabilities are read from `logprobs.top_logprobs[0]` of a
//! one-token greedy completion.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest, CompletionResponse, TokenDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub id: String,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

fn default_timeout() -> u64 {
    120
}

fn default_top_logprobs() -> u32 {
    20
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, String> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| format!("environment variable `{var}` is not set"))?,
            ),
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

    fn endpoint(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, body: Value) -> Result<Value, BackendError> {
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::Permanent(format!("malformed response body: {e}"))),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Permanent(format!("HTTP {status}: {text}"))),
        }
    }

    fn first_choice(v: &Value) -> Result<&Value, BackendError> {
        v.get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::Permanent("response has no choices".into()))
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut body = json!({
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_tokens": request.max_output_units,
            "seed": request.seed,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(m) = &self.config.model {
            body["model"] = json!(m);
        }
        let v = self.post(body)?;
        let choice = Self::first_choice(&v)?;
        let finish = choice.get("finish_reason").and_then(Value::as_str);
        if finish == Some("content_filter") {
            return Err(BackendError::Refused("content filter".into()));
        }
        let text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Permanent("choice has no text".into()))?;
        Ok(CompletionResponse {
            text: text.to_string(),
            backend_id: self.config.id.clone(),
            truncated: finish == Some("length"),
        })
    }

    fn next_token_probabilities(
        &self,
        prompt: &str,
        tokens: &[String],
    ) -> Result<TokenDistribution, BackendError> {
        let mut body = json!({
            "prompt": prompt,
            "temperature": 0.0,
            "max_tokens": 1,
            "logprobs": self.config.top_logprobs,
        });
        if let Some(m) = &self.config.model {
            body["model"] = json!(m);
        }
        let v = self.post(body)?;
        let top = Self::first_choice(&v)?
            .pointer("/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or(BackendError::Unsupported)?;
        let entries = tokens
            .iter()
            .filter_map(|t| {
                top.get(t)
                    .and_then(Value::as_f64)
                    .map(|lp| (t.clone(), lp.exp().clamp(0.0, 1.0)))
            })
            .collect();
        Ok(TokenDistribution { entries })
    }
}
