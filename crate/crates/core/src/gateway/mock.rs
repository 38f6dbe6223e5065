//! Fixture-driven backend for offline runs and tests.
//!
//! Fixture lines map `(prompt_hash, sample_index)` to a completion and
//! `prompt_hash` to next-token probabilities. Entries with a null
//! `sample_index` form a pool; each sample draws from the pool with a
//! ChaCha stream seeded from `(seed, prompt_hash, sample_index)`, so a fixed
//! fixture and seed always answer identically.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, CompletionRequest, CompletionResponse, TokenDistribution};
use crate::corpus::{prompt_hash, read_jsonl, write_jsonl};

/// One fixture line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub prompt_hash: String,
    pub sample_index: Option<u32>,
    pub completion: Option<String>,
    pub token_probs: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockFixture {
    pub entries: Vec<FixtureEntry>,
}

impl MockFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let entries = read_jsonl(path).map_err(|e| e.to_string())?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), String> {
        write_jsonl(path, &self.entries).map_err(|e| e.to_string())
    }

    /// Scripts a completion for `prompt`. `None` adds it to the sampling pool.
    pub fn add_completion(&mut self, prompt: &str, sample_index: Option<u32>, text: &str) {
        self.entries.push(FixtureEntry {
            prompt_hash: prompt_hash(prompt),
            sample_index,
            completion: Some(text.to_string()),
            token_probs: None,
        });
    }

    pub fn add_token_probs<'a>(
        &mut self,
        prompt: &str,
        probs: impl IntoIterator<Item = (&'a str, f64)>,
    ) {
        self.entries.push(FixtureEntry {
            prompt_hash: prompt_hash(prompt),
            sample_index: None,
            completion: None,
            token_probs: Some(probs.into_iter().map(|(t, p)| (t.to_string(), p)).collect()),
        });
    }
}

/// Behaviour for prompts the fixture does not know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UnknownPrompt {
    Error,
    /// `completion` may reference `{prompt_hash}`, `{sample_index}` and `{seed}`.
    Fallback {
        completion: String,
        #[serde(default)]
        token_probs: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Transient,
    Permanent,
    Refused,
}

/// Call counters and concurrency instrumentation.
#[derive(Debug, Default)]
pub struct MockStats {
    complete_calls: AtomicUsize,
    token_calls: AtomicUsize,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
}

impl MockStats {
    pub fn complete_calls(&self) -> usize {
        self.complete_calls.load(Ordering::SeqCst)
    }

    pub fn token_calls(&self) -> usize {
        self.token_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.complete_calls() + self.token_calls()
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight.load(Ordering::SeqCst)
    }
}

struct InflightGuard<'a>(&'a MockStats);

impl<'a> InflightGuard<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        let now = stats.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_inflight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockBackend {
    id: String,
    seed: u64,
    exact: HashMap<(String, u32), String>,
    pools: HashMap<String, Vec<String>>,
    token_probs: HashMap<String, BTreeMap<String, f64>>,
    unknown: UnknownPrompt,
    supports_token_probs: bool,
    latency: Option<Duration>,
    failures: Mutex<HashMap<(String, u32), (u32, FailureKind)>>,
    stats: MockStats,
}

impl MockBackend {
    pub fn new(
        id: impl Into<String>,
        fixture: MockFixture,
        seed: u64,
        unknown: UnknownPrompt,
    ) -> Result<Self, String> {
        let mut exact = HashMap::new();
        let mut pools: HashMap<String, Vec<String>> = HashMap::new();
        let mut token_probs = HashMap::new();
        for (i, e) in fixture.entries.into_iter().enumerate() {
            let line = i + 1;
            if e.prompt_hash.len() != 64 || !e.prompt_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("fixture line {line}: prompt_hash must be 64 hex chars"));
            }
            if e.completion.is_none() && e.token_probs.is_none() {
                return Err(format!("fixture line {line}: neither completion nor token_probs"));
            }
            if let Some(text) = e.completion {
                match e.sample_index {
                    Some(idx) => {
                        if exact.insert((e.prompt_hash.clone(), idx), text).is_some() {
                            return Err(format!(
                                "fixture line {line}: duplicate completion for ({}, {idx})",
                                e.prompt_hash
                            ));
                        }
                    }
                    None => pools.entry(e.prompt_hash.clone()).or_default().push(text),
                }
            }
            if let Some(probs) = e.token_probs {
                if let Some((t, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
                    return Err(format!("fixture line {line}: probability {p} for {t:?} outside [0, 1]"));
                }
                if token_probs.insert(e.prompt_hash.clone(), probs).is_some() {
                    return Err(format!(
                        "fixture line {line}: duplicate token_probs for {}",
                        e.prompt_hash
                    ));
                }
            }
        }
        Ok(Self {
            id: id.into(),
            seed,
            exact,
            pools,
            token_probs,
            unknown,
            supports_token_probs: true,
            latency: None,
            failures: Mutex::new(HashMap::new()),
            stats: MockStats::default(),
        })
    }

    pub fn from_fixture_file(
        id: impl Into<String>,
        path: impl AsRef<Path>,
        seed: u64,
        unknown: UnknownPrompt,
    ) -> Result<Self, String> {
        Self::new(id, MockFixture::load(path)?, seed, unknown)
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Drops next-token support, as for a completion-only service.
    pub fn without_token_probs(mut self) -> Self {
        self.supports_token_probs = false;
        self
    }

    /// Makes the next `times` completion calls for `(prompt_hash, sample_index)` fail.
    pub fn fail_times(&self, prompt_hash: &str, sample_index: u32, times: u32, kind: FailureKind) {
        self.failures
            .lock()
            .expect("failure table poisoned")
            .insert((prompt_hash.to_string(), sample_index), (times, kind));
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    fn pick(&self, hash: &str, request: &CompletionRequest) -> Result<String, BackendError> {
        if let Some(text) = self.exact.get(&(hash.to_string(), request.sample_index)) {
            return Ok(text.clone());
        }
        if let Some(pool) = self.pools.get(hash) {
            if request.temperature == 0.0 || pool.len() == 1 {
                return Ok(pool[0].clone());
            }
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(hash.as_bytes());
            h.update(request.sample_index.to_le_bytes());
            let digest = h.finalize();
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(seed);
            return Ok(pool[rng.random_range(0..pool.len())].clone());
        }
        match &self.unknown {
            UnknownPrompt::Error => Err(BackendError::Permanent(format!(
                "no fixture completion for prompt_hash {hash}"
            ))),
            UnknownPrompt::Fallback { completion, .. } => Ok(completion
                .replace("{prompt_hash}", hash)
                .replace("{sample_index}", &request.sample_index.to_string())
                .replace("{seed}", &self.seed.to_string())),
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.stats.complete_calls.fetch_add(1, Ordering::SeqCst);
        let _guard = InflightGuard::enter(&self.stats);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let hash = prompt_hash(&request.prompt);
        {
            let mut failures = self.failures.lock().expect("failure table poisoned");
            if let Some((left, kind)) = failures.get_mut(&(hash.clone(), request.sample_index)) {
                if *left > 0 {
                    *left -= 1;
                    let msg = format!("scripted failure for ({hash}, {})", request.sample_index);
                    return Err(match kind {
                        FailureKind::Transient => BackendError::Transient(msg),
                        FailureKind::Permanent => BackendError::Permanent(msg),
                        FailureKind::Refused => BackendError::Refused(msg),
                    });
                }
            }
        }
        let text = self.pick(&hash, request)?;
        let limit = request.max_output_units as usize;
        let truncated = text.chars().count() > limit;
        let text = if truncated {
            text.chars().take(limit).collect()
        } else {
            text
        };
        Ok(CompletionResponse {
            text,
            backend_id: self.id.clone(),
            truncated,
        })
    }

    fn next_token_probabilities(
        &self,
        prompt: &str,
        tokens: &[String],
    ) -> Result<TokenDistribution, BackendError> {
        self.stats.token_calls.fetch_add(1, Ordering::SeqCst);
        let _guard = InflightGuard::enter(&self.stats);
        if !self.supports_token_probs {
            return Err(BackendError::Unsupported);
        }
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let hash = prompt_hash(prompt);
        let probs = match (self.token_probs.get(&hash), &self.unknown) {
            (Some(p), _) => p,
            (None, UnknownPrompt::Fallback { token_probs, .. }) => token_probs,
            (None, UnknownPrompt::Error) => {
                return Err(BackendError::Permanent(format!(
                    "no fixture token_probs for prompt_hash {hash}"
                )))
            }
        };
        let entries = tokens
            .iter()
            .filter_map(|t| probs.get(t).map(|p| (t.clone(), *p)))
            .collect();
        Ok(TokenDistribution { entries })
    }
}
