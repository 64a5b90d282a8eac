//! Chat-completion plumbing: a live HTTP backend and a deterministic
//! simulated backend behind one trait, wrapped by a gateway that adds
//! retries, an in-flight bound, a persistent response cache, and call
//! accounting.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid completion request: {reason}")]
    InvalidRequest { reason: String },
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    #[error("backend returned status {status}: {excerpt}")]
    Backend { status: u16, excerpt: String },
    #[error("malformed backend response: {detail}")]
    MalformedResponse { detail: String },
    #[error("backend returned {got} completions, expected {expected}")]
    WrongBatchSize { expected: usize, got: usize },
    #[error("giving up after {attempts} attempts: {source}")]
    Exhausted {
        attempts: u32,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("simulation script has no rules")]
    EmptyScript,
    #[error("simulation script rule {index}: {reason}")]
    BadScriptRule { index: usize, reason: String },
    #[error("response cache {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("response cache line {line}: {source}")]
    CacheParse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl GatewayError {
    /// Timeouts and other transport failures, 429, and 5xx are transient.
    pub fn is_retriable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Backend { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// One sampling request. `seed` only influences the simulated backend; the
/// live wire format does not carry it, but it still keys the response cache
/// so distinct sampling slots stay distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl CompletionRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest {
                reason: "at least one message required".into(),
            });
        }
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest {
                reason: "n_samples must be ≥ 1".into(),
            });
        }
        Ok(())
    }

    /// Canonical JSON rendering; the basis for cache keys and simulated
    /// seeding. Struct field order is fixed, so this is byte-stable.
    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionBatch {
    pub completions: Vec<String>,
    pub backend_id: String,
    pub cached: bool,
}

/// A chat-completion source. Implementations return exactly `n_samples`
/// completions or an error — never a partial batch.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError>;
    /// Stable identity for cache keying; must change whenever the backend
    /// would answer differently (endpoint, model, script, seed).
    fn id(&self) -> String;
}

/// Exponential backoff with jitter. `run` retries the operation while the
/// classifier deems errors transient, up to `max_attempts` total attempts.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Fast policy for tests: immediate retries, same attempt budget.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, E>,
        retriable: impl Fn(&E) -> bool,
    ) -> Result<T, E> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match op(attempt) {
                Ok(value) => return Ok(value),
                Err(e) if attempt < self.max_attempts && retriable(&e) => {
                    let exp = self
                        .base_delay
                        .saturating_mul(2u32.saturating_pow(attempt - 1))
                        .min(self.max_delay);
                    // Jitter in [0.5, 1.0)× the capped delay spreads out
                    // concurrent retries after a shared 429.
                    let jittered = exp.mul_f64(0.5 + 0.5 * rand::random::<f64>());
                    std::thread::sleep(jittered);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Live backend speaking the common chat-completions wire format.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
        }
    }

    /// Bearer credential; callers read it from the configured environment
    /// variable and hand it over at startup. It is never written anywhere.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n_samples,
        });
        let mut http_request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            http_request = http_request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = http_request
            .send_json(&body)
            .map_err(|e| GatewayError::Transport { detail: e.to_string() })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport { detail: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Backend {
                status,
                excerpt: text.chars().take(200).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse { detail: e.to_string() })?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| c.message.content)
            .collect())
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }
}

/// One simulated response rule: the first rule whose `pattern` occurs as a
/// substring of the rendered prompt wins. `weights` may be empty (uniform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub responses: Vec<String>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

/// A response script for the simulated backend, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
}

/// Offline backend with reproducible sampling. Each request draws from a
/// generator seeded by `hash(master_seed, canonical request)`, so identical
/// requests repeat exactly while distinct requests (different prompt,
/// n_samples, or seed field) sample independently — no shared mutable state.
#[derive(Debug)]
pub struct SimulatedBackend {
    rules: Vec<ScriptRule>,
    master_seed: u64,
    backend_id: String,
}

impl SimulatedBackend {
    pub fn new(script: Script, master_seed: u64) -> Result<Self, GatewayError> {
        if script.rules.is_empty() {
            return Err(GatewayError::EmptyScript);
        }
        for (index, rule) in script.rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(GatewayError::BadScriptRule {
                    index,
                    reason: "no responses".into(),
                });
            }
            if !rule.weights.is_empty() {
                if rule.weights.len() != rule.responses.len() {
                    return Err(GatewayError::BadScriptRule {
                        index,
                        reason: format!(
                            "{} weights for {} responses",
                            rule.weights.len(),
                            rule.responses.len()
                        ),
                    });
                }
                if rule.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                    || rule.weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(GatewayError::BadScriptRule {
                        index,
                        reason: "weights must be nonnegative with positive sum".into(),
                    });
                }
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(serde_json::to_string(&script).expect("script serializes"));
        let backend_id = format!("sim:{}", hex::encode(&hasher.finalize()[..8]));
        Ok(Self {
            rules: script.rules,
            master_seed,
            backend_id,
        })
    }

    fn rng_for(&self, request: &CompletionRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update(request.canonical_json().as_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sample(rule: &ScriptRule, rng: &mut ChaCha8Rng) -> String {
        use rand::Rng;
        if rule.weights.is_empty() {
            let idx = rng.random_range(0..rule.responses.len());
            return rule.responses[idx].clone();
        }
        let total: f64 = rule.weights.iter().sum();
        let mut point = rng.random::<f64>() * total;
        for (response, weight) in rule.responses.iter().zip(&rule.weights) {
            point -= weight;
            if point < 0.0 {
                return response.clone();
            }
        }
        rule.responses.last().expect("nonempty").clone()
    }
}

impl ChatBackend for SimulatedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        let prompt: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let rule = self.rules.iter().find(|r| prompt.contains(&r.pattern));
        let mut rng = self.rng_for(request);
        Ok((0..request.n_samples)
            .map(|_| match rule {
                Some(rule) => Self::sample(rule, &mut rng),
                None => "UNMATCHED".to_string(),
            })
            .collect())
    }

    fn id(&self) -> String {
        self.backend_id.clone()
    }
}

/// Counting semaphore: bounds concurrent backend calls without pulling in an
/// async runtime.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        assert!(permits > 0, "in-flight bound must be positive");
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.semaphore.permits.lock().unwrap() += 1;
        self.semaphore.available.notify_one();
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    completions: Vec<String>,
}

/// Content-addressed completion cache. Entries append to a JSON-Lines file
/// as they arrive so interrupted runs resume without repeating requests.
struct ResponseCache {
    inner: Mutex<ResponseCacheInner>,
}

struct ResponseCacheInner {
    entries: HashMap<String, Vec<String>>,
    writer: Option<(PathBuf, BufWriter<File>)>,
}

impl ResponseCache {
    fn open(path: Option<&Path>) -> Result<Self, GatewayError> {
        let mut entries = HashMap::new();
        let writer = match path {
            Some(path) => {
                match File::open(path) {
                    Ok(file) => {
                        for (idx, line) in BufReader::new(file).lines().enumerate() {
                            let line = line.map_err(|source| GatewayError::CacheIo {
                                path: path.to_path_buf(),
                                source,
                            })?;
                            let parsed: CacheLine =
                                serde_json::from_str(&line).map_err(|source| {
                                    GatewayError::CacheParse { line: idx + 1, source }
                                })?;
                            entries.insert(parsed.key, parsed.completions);
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(source) => {
                        return Err(GatewayError::CacheIo {
                            path: path.to_path_buf(),
                            source,
                        })
                    }
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|source| GatewayError::CacheIo {
                        path: path.to_path_buf(),
                        source,
                    })?;
                Some((path.to_path_buf(), BufWriter::new(file)))
            }
            None => None,
        };
        Ok(Self {
            inner: Mutex::new(ResponseCacheInner { entries, writer }),
        })
    }

    fn get(&self, key: &str) -> Option<Vec<String>> {
        self.inner.lock().unwrap().entries.get(key).cloned()
    }

    /// First write wins; a concurrent duplicate keeps the original entry so
    /// hits stay byte-identical to the first response.
    fn put(&self, key: String, completions: Vec<String>) -> Result<(), GatewayError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(&key) {
            return Ok(());
        }
        inner.entries.insert(key.clone(), completions.clone());
        if let Some((path, writer)) = inner.writer.as_mut() {
            let to_io = |source| GatewayError::CacheIo { path: path.clone(), source };
            let line = serde_json::to_string(&CacheLine { key, completions })
                .expect("cache line serializes");
            writeln!(writer, "{line}").map_err(to_io)?;
            writer.flush().map_err(to_io)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache_path: Option<PathBuf>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            cache_path: None,
        }
    }
}

/// The single entry point callers use to talk to a backend. Shareable across
/// threads; enforces the in-flight bound, retries transient failures, serves
/// and fills the response cache, and counts actual backend calls.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    backend_id: String,
    retry: RetryPolicy,
    semaphore: Semaphore,
    cache: ResponseCache,
    calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, options: GatewayOptions) -> Result<Self, GatewayError> {
        Ok(Self {
            backend_id: backend.id(),
            backend,
            retry: options.retry,
            semaphore: Semaphore::new(options.max_in_flight),
            cache: ResponseCache::open(options.cache_path.as_deref())?,
            calls: AtomicU64::new(0),
        })
    }

    /// Number of requests actually issued to the backend (cache misses,
    /// counting each retry attempt).
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn cache_key(&self, request: &CompletionRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.backend_id.as_bytes());
        hasher.update(request.canonical_json().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionBatch, GatewayError> {
        request.validate()?;
        let key = self.cache_key(request);
        if let Some(completions) = self.cache.get(&key) {
            return Ok(CompletionBatch {
                completions,
                backend_id: self.backend_id.clone(),
                cached: true,
            });
        }

        let _permit = self.semaphore.acquire();
        let result = self.retry.run(
            |_attempt| {
                self.calls.fetch_add(1, Ordering::Relaxed);
                self.backend.complete(request)
            },
            GatewayError::is_retriable,
        );
        let completions = match result {
            Ok(completions) => completions,
            // A retriable error that survived the loop means attempts ran out.
            Err(e) if e.is_retriable() => {
                return Err(GatewayError::Exhausted {
                    attempts: self.retry.max_attempts,
                    source: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        };
        if completions.len() != request.n_samples {
            return Err(GatewayError::WrongBatchSize {
                expected: request.n_samples,
                got: completions.len(),
            });
        }
        self.cache.put(key, completions.clone())?;
        Ok(CompletionBatch {
            completions,
            backend_id: self.backend_id.clone(),
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn request(content: &str, n_samples: usize, seed: u64) -> CompletionRequest {
        CompletionRequest {
            messages: vec![Message::user(content)],
            temperature: 1.0,
            max_tokens: 256,
            n_samples,
            seed,
        }
    }

    fn ab_script() -> Script {
        Script {
            rules: vec![ScriptRule {
                pattern: "letter of your choice".into(),
                responses: vec!["A".into(), "B".into()],
                weights: vec![0.75, 0.25],
            }],
        }
    }

    #[test]
    fn simulated_backend_returns_requested_cardinality() {
        let backend = SimulatedBackend::new(ab_script(), 1).unwrap();
        let batch = backend
            .complete(&request("pick the letter of your choice", 3, 0))
            .unwrap();
        assert_eq!(batch.len(), 3);
        assert!(batch.iter().all(|c| c == "A" || c == "B"));
    }

    #[test]
    fn simulated_backend_is_deterministic_per_request() {
        let a = SimulatedBackend::new(ab_script(), 7).unwrap();
        let b = SimulatedBackend::new(ab_script(), 7).unwrap();
        let req = request("pick the letter of your choice", 10, 3);
        assert_eq!(a.complete(&req).unwrap(), b.complete(&req).unwrap());

        // A different request seed draws an independent sequence.
        let other = request("pick the letter of your choice", 10, 4);
        assert_ne!(a.complete(&req).unwrap(), a.complete(&other).unwrap());
    }

    #[test]
    fn simulated_backend_unmatched_prompt_yields_sentinel() {
        let backend = SimulatedBackend::new(ab_script(), 1).unwrap();
        let batch = backend.complete(&request("something else entirely", 2, 0)).unwrap();
        assert_eq!(batch, vec!["UNMATCHED", "UNMATCHED"]);
    }

    #[test]
    fn empty_script_is_rejected() {
        let err = SimulatedBackend::new(Script { rules: vec![] }, 1).unwrap_err();
        assert!(matches!(err, GatewayError::EmptyScript));
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let script = Script {
            rules: vec![ScriptRule {
                pattern: "x".into(),
                responses: vec!["1".into(), "2".into()],
                weights: vec![1.0],
            }],
        };
        assert!(matches!(
            SimulatedBackend::new(script, 1),
            Err(GatewayError::BadScriptRule { index: 0, .. })
        ));
    }

    #[test]
    fn seeded_draw_frequencies_match_weights() {
        // 0.75/0.25 weights over 1000 draws at seed 9: the "A" frequency
        // lands within [0.70, 0.80].
        let backend = SimulatedBackend::new(ab_script(), 9).unwrap();
        let batch = backend
            .complete(&request("pick the letter of your choice", 1000, 0))
            .unwrap();
        let a_freq = batch.iter().filter(|c| *c == "A").count() as f64 / 1000.0;
        assert!((0.70..=0.80).contains(&a_freq), "A frequency {a_freq}");
    }

    /// Backend that fails a fixed number of times before succeeding.
    struct FlakyBackend {
        failures_left: Mutex<u32>,
        retriable: bool,
    }

    impl ChatBackend for FlakyBackend {
        fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return if self.retriable {
                    Err(GatewayError::Backend { status: 429, excerpt: "slow down".into() })
                } else {
                    Err(GatewayError::Backend { status: 400, excerpt: "bad request".into() })
                };
            }
            Ok(vec!["ok".to_string(); request.n_samples])
        }

        fn id(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn gateway_retries_transient_failures() {
        let backend = Arc::new(FlakyBackend {
            failures_left: Mutex::new(2),
            retriable: true,
        });
        let gateway = Gateway::new(
            backend,
            GatewayOptions {
                retry: RetryPolicy::immediate(5),
                ..Default::default()
            },
        )
        .unwrap();
        let batch = gateway.complete(&request("hello", 1, 0)).unwrap();
        assert_eq!(batch.completions, vec!["ok"]);
        assert!(!batch.cached);
        assert_eq!(gateway.backend_calls(), 3, "two failures plus the success");
    }

    #[test]
    fn gateway_does_not_retry_permanent_failures() {
        let backend = Arc::new(FlakyBackend {
            failures_left: Mutex::new(1),
            retriable: false,
        });
        let gateway = Gateway::new(
            backend,
            GatewayOptions {
                retry: RetryPolicy::immediate(5),
                ..Default::default()
            },
        )
        .unwrap();
        let err = gateway.complete(&request("hello", 1, 0)).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { status: 400, .. }));
        assert_eq!(gateway.backend_calls(), 1);
    }

    #[test]
    fn gateway_reports_exhausted_retries() {
        let backend = Arc::new(FlakyBackend {
            failures_left: Mutex::new(u32::MAX),
            retriable: true,
        });
        let gateway = Gateway::new(
            backend,
            GatewayOptions {
                retry: RetryPolicy::immediate(3),
                ..Default::default()
            },
        )
        .unwrap();
        let err = gateway.complete(&request("hello", 1, 0)).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }), "{err}");
        assert_eq!(gateway.backend_calls(), 3);
    }

    #[test]
    fn gateway_rejects_partial_batches() {
        struct ShortBackend;
        impl ChatBackend for ShortBackend {
            fn complete(&self, _: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
                Ok(vec!["only one".into()])
            }
            fn id(&self) -> String {
                "short".into()
            }
        }
        let gateway = Gateway::new(Arc::new(ShortBackend), GatewayOptions::default()).unwrap();
        let err = gateway.complete(&request("hello", 3, 0)).unwrap_err();
        assert!(matches!(err, GatewayError::WrongBatchSize { expected: 3, got: 1 }));
    }

    #[test]
    fn cache_serves_identical_bytes_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("responses.jsonl");
        let script = ab_script();

        let gateway = Gateway::new(
            Arc::new(SimulatedBackend::new(script.clone(), 11).unwrap()),
            GatewayOptions {
                cache_path: Some(cache_path.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let req = request("pick the letter of your choice", 8, 1);
        let first = gateway.complete(&req).unwrap();
        assert!(!first.cached);
        let second = gateway.complete(&req).unwrap();
        assert!(second.cached);
        assert_eq!(first.completions, second.completions);
        assert_eq!(gateway.backend_calls(), 1);

        // A fresh gateway over the same cache file serves the hit directly.
        let reopened = Gateway::new(
            Arc::new(SimulatedBackend::new(script, 11).unwrap()),
            GatewayOptions {
                cache_path: Some(cache_path),
                ..Default::default()
            },
        )
        .unwrap();
        let third = reopened.complete(&req).unwrap();
        assert!(third.cached);
        assert_eq!(third.completions, first.completions);
        assert_eq!(reopened.backend_calls(), 0);
    }

    #[test]
    fn cache_distinguishes_request_seeds() {
        let gateway = Gateway::new(
            Arc::new(SimulatedBackend::new(ab_script(), 11).unwrap()),
            GatewayOptions::default(),
        )
        .unwrap();
        gateway.complete(&request("pick the letter of your choice", 4, 1)).unwrap();
        let batch = gateway.complete(&request("pick the letter of your choice", 4, 2)).unwrap();
        assert!(!batch.cached, "different seed fields must miss the cache");
        assert_eq!(gateway.backend_calls(), 2);
    }

    #[test]
    fn in_flight_bound_is_respected() {
        struct GaugeBackend {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for GaugeBackend {
            fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(vec!["ok".to_string(); request.n_samples])
            }
            fn id(&self) -> String {
                "gauge".into()
            }
        }

        let backend = Arc::new(GaugeBackend {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gateway = Arc::new(
            Gateway::new(
                backend.clone(),
                GatewayOptions {
                    max_in_flight: 4,
                    ..Default::default()
                },
            )
            .unwrap(),
        );

        std::thread::scope(|scope| {
            for i in 0..16 {
                let gateway = Arc::clone(&gateway);
                scope.spawn(move || {
                    gateway.complete(&request(&format!("prompt {i}"), 1, i)).unwrap();
                });
            }
        });
        let peak = backend.peak.load(Ordering::SeqCst);
        assert!(peak <= 4, "peak in-flight {peak} exceeded the bound");
        assert_eq!(gateway.backend_calls(), 16);
    }

    #[test]
    fn request_validation_rejects_degenerate_inputs() {
        let gateway = Gateway::new(
            Arc::new(SimulatedBackend::new(ab_script(), 0).unwrap()),
            GatewayOptions::default(),
        )
        .unwrap();
        let no_messages = CompletionRequest {
            messages: vec![],
            temperature: 1.0,
            max_tokens: 16,
            n_samples: 1,
            seed: 0,
        };
        assert!(matches!(
            gateway.complete(&no_messages),
            Err(GatewayError::InvalidRequest { .. })
        ));
        let zero_samples = request("x", 0, 0);
        assert!(matches!(
            gateway.complete(&zero_samples),
            Err(GatewayError::InvalidRequest { .. })
        ));
    }
}
