//! One contract for every text-completion backend used by the pipeline.
//!
//! [`Gateway`] wraps a [`Backend`] with an on-disk response cache, a rate
//! limiter and retry with exponential backoff. Backend adapters classify
//! their own failures; the gateway only acts on the classification.

mod cache;
mod http;
mod limiter;
mod mock;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::prompt_hash;

pub use cache::{CacheEntry, CachePayload, DiskCache};
pub use http::{HttpBackend, HttpBackendConfig};
pub use limiter::{Permit, RateLimiter};
pub use mock::{FailureKind, FixtureEntry, MockBackend, MockFixture, MockStats, UnknownPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_units: u32,
    pub stop_sequences: Vec<String>,
    /// Distinguishes fan-out samples of the same prompt.
    pub sample_index: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub backend_id: String,
    pub truncated: bool,
}

/// Probabilities for named next tokens. Entries need not sum to one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub entries: BTreeMap<String, f64>,
}

impl TokenDistribution {
    pub fn get(&self, token: &str) -> f64 {
        self.entries.get(token).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Completion,
    NextToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub prompt_hash: String,
    pub temperature: f64,
    pub seed: u64,
    pub sample_index: u32,
    pub request_kind: RequestKind,
    /// Probed tokens for next-token requests; empty for completions.
    pub candidate_tokens: Vec<String>,
}

impl CacheKey {
    /// Hex SHA-256 over the canonical JSON encoding of the key.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("cache key serializes");
        hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes))
    }
}

/// Failure as classified by a backend adapter.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("permanent failure: {0}")]
    Permanent(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("token probabilities not supported")]
    Unsupported,
}

/// A text-completion service. Implementations must be shareable across threads.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// Next-token probabilities for the given surface tokens. Tokens outside
    /// the backend's reported support may be omitted.
    fn next_token_probabilities(
        &self,
        _prompt: &str,
        _tokens: &[String],
    ) -> Result<TokenDistribution, BackendError> {
        Err(BackendError::Unsupported)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend `{backend}` failed after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend `{backend}` refused: {message}")]
    Content { backend: String, message: String },
    #[error("backend `{backend}` does not expose token probabilities")]
    Capability { backend: String },
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

/// Source of `created_at` stamps for fresh backend responses.
#[derive(Debug, Clone, PartialEq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completed {
    pub response: CompletionResponse,
    /// When the response was first obtained from the backend.
    pub created_at: DateTime<Utc>,
    pub cached: bool,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    limiter: RateLimiter,
    retry: RetryPolicy,
    clock: Clock,
    seed: u64,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            limiter: RateLimiter::new(8, None),
            retry: RetryPolicy::default(),
            clock: Clock::System,
            seed: 0,
            key_locks: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_limiter(mut self, limiter: RateLimiter) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Seed recorded in next-token cache keys.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn max_inflight(&self) -> usize {
        self.limiter.max_inflight()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Backend invocations made through this gateway, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completed, GatewayError> {
        if request.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if request.temperature.is_nan() || request.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                request.temperature
            )));
        }
        let key = CacheKey {
            backend_id: self.backend.id().to_string(),
            prompt_hash: prompt_hash(&request.prompt),
            temperature: request.temperature,
            seed: request.seed,
            sample_index: request.sample_index,
            request_kind: RequestKind::Completion,
            candidate_tokens: Vec::new(),
        };
        let entry = self.cached_or_fetch(&key, || {
            let mut response = self.backend.complete(request)?;
            if response.backend_id != self.backend.id() {
                return Err(BackendError::Permanent(format!(
                    "response attributed to `{}`",
                    response.backend_id
                )));
            }
            response.text = cut_at_stop(&response.text, &request.stop_sequences).to_string();
            Ok(CachePayload::Completion(response))
        })?;
        match entry.0.payload {
            CachePayload::Completion(response) => Ok(Completed {
                response,
                created_at: entry.0.created_at,
                cached: entry.1,
            }),
            CachePayload::Tokens(_) => Err(GatewayError::Cache(format!(
                "entry {} holds a token distribution",
                key.digest()
            ))),
        }
    }

    /// Probability of each candidate token as the next token after `prompt`.
    /// Tokens the backend does not report get probability 0.
    pub fn next_token_probabilities(
        &self,
        prompt: &str,
        candidate_tokens: &[String],
    ) -> Result<TokenDistribution, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if candidate_tokens.is_empty() {
            return Err(GatewayError::InvalidRequest("no candidate tokens".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = candidate_tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(GatewayError::InvalidRequest(format!(
                "duplicate candidate token {dup:?}"
            )));
        }
        let key = CacheKey {
            backend_id: self.backend.id().to_string(),
            prompt_hash: prompt_hash(prompt),
            temperature: 0.0,
            seed: self.seed,
            sample_index: 0,
            request_kind: RequestKind::NextToken,
            candidate_tokens: candidate_tokens.to_vec(),
        };
        let (entry, _) = self.cached_or_fetch(&key, || {
            let dist = self.backend.next_token_probabilities(prompt, candidate_tokens)?;
            let mut entries = BTreeMap::new();
            for t in candidate_tokens {
                let p = dist.get(t);
                if !(0.0..=1.0).contains(&p) {
                    return Err(BackendError::Permanent(format!(
                        "probability {p} for {t:?} outside [0, 1]"
                    )));
                }
                entries.insert(t.clone(), p);
            }
            Ok(CachePayload::Tokens(TokenDistribution { entries }))
        })?;
        match entry.payload {
            CachePayload::Tokens(dist) => Ok(dist),
            CachePayload::Completion(_) => Err(GatewayError::Cache(format!(
                "entry {} holds a completion",
                key.digest()
            ))),
        }
    }

    fn cached_or_fetch(
        &self,
        key: &CacheKey,
        fetch: impl Fn() -> Result<CachePayload, BackendError>,
    ) -> Result<(CacheEntry, bool), GatewayError> {
        let Some(cache) = &self.cache else {
            let payload = self.call_with_retry(&fetch)?;
            return Ok((
                CacheEntry {
                    key: key.clone(),
                    created_at: self.clock.now(),
                    payload,
                },
                false,
            ));
        };
        let digest = key.digest();
        let lock = {
            let mut locks = self.key_locks.lock().expect("key lock table poisoned");
            locks.entry(digest.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("key lock poisoned");
        if let Some(entry) = cache.get(key).map_err(GatewayError::Cache)? {
            return Ok((entry, true));
        }
        let payload = self.call_with_retry(&fetch)?;
        let entry = CacheEntry {
            key: key.clone(),
            created_at: self.clock.now(),
            payload,
        };
        let stored = cache.put(entry).map_err(GatewayError::Cache)?;
        Ok((stored, false))
    }

    fn call_with_retry(
        &self,
        fetch: &impl Fn() -> Result<CachePayload, BackendError>,
    ) -> Result<CachePayload, GatewayError> {
        let backend = self.backend.id().to_string();
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                fetch()
            };
            match result {
                Ok(payload) => return Ok(payload),
                Err(BackendError::Transient(message)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            backend,
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    let delay = self.retry.delay(attempt);
                    log::debug!("transient failure from {backend}: {message}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(BackendError::Permanent(message)) => {
                    return Err(GatewayError::Transport {
                        backend,
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(BackendError::Refused(message)) => {
                    return Err(GatewayError::Content { backend, message })
                }
                Err(BackendError::Unsupported) => return Err(GatewayError::Capability { backend }),
            }
        }
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn cut_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let end = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..end]
}

/// Applies `f` to every item on up to `workers` scoped threads and returns
/// results in input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let chunks: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            break;
                        }
                        out.push((i, f(&items[i])));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    for (i, r) in chunks.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots
        .into_iter()
        .map(|r| r.expect("every index processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, sample_index: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: 0.7,
            max_output_units: 512,
            stop_sequences: vec![],
            sample_index,
            seed: 1,
        }
    }

    fn mock_with(prompt: &str, text: &str) -> Arc<MockBackend> {
        let mut fx = MockFixture::default();
        fx.add_completion(prompt, Some(0), text);
        fx.add_token_probs(prompt, [("Yes", 0.6), ("No", 0.2)]);
        Arc::new(MockBackend::new("mock", fx, 0, UnknownPrompt::Error).unwrap())
    }

    fn fast_retry(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            backoff_base_ms: 1,
            backoff_max_ms: 2,
        }
    }

    #[test]
    fn mock_echoes_scripted_completion() {
        let mock = mock_with("P", "doc...\n\nAnswer: Judy Blume");
        let gw = Gateway::new(mock.clone());
        let out = gw.complete(&req("P", 0)).unwrap();
        assert_eq!(out.response.text, "doc...\n\nAnswer: Judy Blume");
        assert_eq!(out.response.backend_id, "mock");
    }

    #[test]
    fn second_identical_request_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mock = mock_with("P", "doc\n\nAnswer: X");
        let gw = Gateway::new(mock.clone()).with_cache(DiskCache::open(dir.path()).unwrap());
        let a = gw.complete(&req("P", 0)).unwrap();
        assert_eq!(mock.stats().complete_calls(), 1);
        let b = gw.complete(&req("P", 0)).unwrap();
        assert_eq!(mock.stats().complete_calls(), 1);
        assert!(b.cached && !a.cached);
        assert_eq!(a.response, b.response);
        assert_eq!(a.created_at, b.created_at);
    }

    #[test]
    fn cache_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let mock = mock_with("P", "doc\n\nAnswer: X");
        let plain = Gateway::new(mock.clone()).complete(&req("P", 0)).unwrap();
        let cached_gw = Gateway::new(mock).with_cache(DiskCache::open(dir.path()).unwrap());
        cached_gw.complete(&req("P", 0)).unwrap();
        let hit = cached_gw.complete(&req("P", 0)).unwrap();
        assert_eq!(
            serde_json::to_vec(&plain.response).unwrap(),
            serde_json::to_vec(&hit.response).unwrap()
        );
    }

    #[test]
    fn exhausted_retries_give_transport_error() {
        let mock = mock_with("P", "doc\n\nAnswer: X");
        mock.fail_times(&prompt_hash("P"), 0, 3, FailureKind::Transient);
        let gw = Gateway::new(mock.clone()).with_retry(fast_retry(2));
        match gw.complete(&req("P", 0)) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(mock.stats().complete_calls(), 3);
    }

    #[test]
    fn retry_recovers_within_budget() {
        let mock = mock_with("P", "doc\n\nAnswer: X");
        mock.fail_times(&prompt_hash("P"), 0, 2, FailureKind::Transient);
        let gw = Gateway::new(mock.clone()).with_retry(fast_retry(2));
        assert!(gw.complete(&req("P", 0)).is_ok());
        assert_eq!(gw.backend_calls(), 3);
    }

    #[test]
    fn refusal_is_content_error_without_retry() {
        let mock = mock_with("P", "x");
        mock.fail_times(&prompt_hash("P"), 0, 1, FailureKind::Refused);
        let gw = Gateway::new(mock.clone()).with_retry(fast_retry(5));
        assert!(matches!(
            gw.complete(&req("P", 0)),
            Err(GatewayError::Content { .. })
        ));
        assert_eq!(mock.stats().complete_calls(), 1);
    }

    #[test]
    fn token_probabilities_echo_and_fill_zero() {
        let gw = Gateway::new(mock_with("P", "x"));
        let toks = vec!["Yes".to_string(), "No".to_string(), " Yes".to_string()];
        let d = gw.next_token_probabilities("P", &toks).unwrap();
        assert_eq!(d.get("Yes"), 0.6);
        assert_eq!(d.get("No"), 0.2);
        assert_eq!(d.entries[" Yes"], 0.0);
    }

    #[test]
    fn duplicate_candidate_tokens_rejected() {
        let gw = Gateway::new(mock_with("P", "x"));
        let toks = vec!["Yes".to_string(), "Yes".to_string()];
        assert!(matches!(
            gw.next_token_probabilities("P", &toks),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn backend_without_token_probs_is_capability_error() {
        struct TextOnly;
        impl Backend for TextOnly {
            fn id(&self) -> &str {
                "text-only"
            }
            fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
                Ok(CompletionResponse {
                    text: "t".into(),
                    backend_id: "text-only".into(),
                    truncated: false,
                })
            }
        }
        let gw = Gateway::new(Arc::new(TextOnly));
        match gw.next_token_probabilities("P", &["Yes".to_string()]) {
            Err(GatewayError::Capability { backend }) => assert_eq!(backend, "text-only"),
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn misattributed_response_rejected() {
        struct Liar;
        impl Backend for Liar {
            fn id(&self) -> &str {
                "a"
            }
            fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
                Ok(CompletionResponse {
                    text: "t".into(),
                    backend_id: "b".into(),
                    truncated: false,
                })
            }
        }
        assert!(Gateway::new(Arc::new(Liar)).complete(&req("P", 0)).is_err());
    }

    #[test]
    fn stop_sequences_are_cut() {
        let mock = mock_with("P", "doc\n\nAnswer: X\nQuestion: next");
        let gw = Gateway::new(mock);
        let mut r = req("P", 0);
        r.stop_sequences = vec!["\nQuestion:".into()];
        assert_eq!(gw.complete(&r).unwrap().response.text, "doc\n\nAnswer: X");
        assert_eq!(cut_at_stop("abc", &["".into()]), "abc");
    }

    #[test]
    fn empty_prompt_rejected() {
        let gw = Gateway::new(mock_with("P", "x"));
        assert!(matches!(
            gw.complete(&req("", 0)),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn inflight_limit_respected_under_fan_out() {
        let mut fx = MockFixture::default();
        for i in 0..24 {
            fx.add_completion("P", Some(i), "d\n\nAnswer: a");
        }
        let mock = Arc::new(
            MockBackend::new("mock", fx, 0, UnknownPrompt::Error)
                .unwrap()
                .with_latency(Duration::from_millis(10)),
        );
        let gw = Gateway::new(mock.clone()).with_limiter(RateLimiter::new(3, None));
        let idx: Vec<u32> = (0..24).collect();
        let out = parallel_map(&idx, 12, |i| gw.complete(&req("P", *i)).is_ok());
        assert!(out.iter().all(|ok| *ok));
        assert!(mock.stats().max_inflight() <= 3);
        assert!(mock.stats().max_inflight() >= 2);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        let out = parallel_map(&items, 7, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            backoff_base_ms: 100,
            backoff_max_ms: 350,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
    }
}
