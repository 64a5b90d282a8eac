//! Dense retrieval of historical incidents under a token budget.
//!
//! Incident descriptions are embedded (live HTTP provider or a deterministic
//! mock), ranked by inner-product similarity against a query embedding, and
//! the longest ranked prefix whose rendered reference text fits the token
//! budget is selected as context.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{count_tokens, Corpus, Incident};
use crate::gateway::RetryPolicy;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid embedding: {reason}")]
    InvalidEmbedding { reason: String },
    #[error("embedding transport failure: {detail}")]
    Transport { detail: String },
    #[error("embedding backend returned status {status}: {excerpt}")]
    Backend { status: u16, excerpt: String },
    #[error("malformed embedding response: {detail}")]
    MalformedResponse { detail: String },
    #[error("retrieval incident \"{id}\" is missing a root cause")]
    MissingRootCause { id: String },
    #[error("embedding cache {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding cache line {line}: {source}")]
    CacheParse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl RetrievalError {
    /// Transient failures worth retrying: transport errors, 429, and 5xx.
    pub fn is_retriable(&self) -> bool {
        match self {
            RetrievalError::Transport { .. } => true,
            RetrievalError::Backend { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A dense vector representation of an incident description.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::InvalidEmbedding {
                reason: "dimension must be > 0".into(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidEmbedding {
                reason: format!("non-finite entry {bad}"),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Inner product; both vectors must share a dimension.
    pub fn dot(&self, other: &Embedding) -> Result<f64, RetrievalError> {
        if self.dim() != other.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

/// Source of embeddings. Implementations must be deterministic: the same
/// text always maps to the same vector of the provider's fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError>;
    fn dim(&self) -> usize;
}

/// Deterministic offline embedder: character 3-grams feature-hashed into a
/// fixed-width vector, L2-normalized. Overlapping n-grams give related texts
/// related vectors, which is all the tests and the simulator need.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

/// FNV-1a over raw bytes; a stable hash is required so vectors do not shift
/// between runs or platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        if text.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut buckets = vec![0.0f64; self.dim];
        let mut bump = |gram: &str| {
            let h = fnv1a(gram.as_bytes());
            buckets[(h % self.dim as u64) as usize] += 1.0;
        };
        if chars.len() < 3 {
            bump(text);
        } else {
            for window in chars.windows(3) {
                bump(&window.iter().collect::<String>());
            }
        }
        let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut buckets {
            *v /= norm;
        }
        Embedding::new(buckets)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Live embedding backend speaking `POST {"input","model"}` →
/// `{"data":[{"embedding":[..]}]}`. Retries transient failures.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            api_key: None,
            retry: RetryPolicy::default(),
        }
    }

    /// Bearer credential, typically read from an environment variable by the
    /// caller at startup; never persisted.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn call_once(&self, text: &str) -> Result<Embedding, RetrievalError> {
        let body = serde_json::json!({ "input": text, "model": self.model });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| RetrievalError::Transport { detail: e.to_string() })?;
        let status = response.status().as_u16();
        let text_body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| RetrievalError::Transport { detail: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(RetrievalError::Backend {
                status,
                excerpt: text_body.chars().take(200).collect(),
            });
        }
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text_body).map_err(|e| RetrievalError::MalformedResponse {
                detail: e.to_string(),
            })?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| RetrievalError::MalformedResponse {
                detail: "empty data array".into(),
            })?
            .embedding;
        if vector.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        Embedding::new(vector)
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        if text.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        self.retry
            .run(|_attempt| self.call_once(text), RetrievalError::is_retriable)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Renders one retrieved incident the way it is counted against the token
/// budget and spliced into prompts.
pub fn reference_text(incident: &Incident) -> String {
    format!(
        "Incident: {}\nRoot cause: {}\n\n",
        incident.description,
        incident.root_cause.as_deref().unwrap_or("")
    )
}

fn reference_token_len(incident: &Incident) -> usize {
    count_tokens(&reference_text(incident))
}

/// Hex SHA-256 of a description; the embedding-cache key.
pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    sha256: String,
    dim: usize,
    values: Vec<f64>,
}

/// On-disk embedding store, JSON-Lines of `{"sha256","dim","values"}` keyed
/// by content hash of the embedded text. Loaded eagerly, written on `save`.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: HashMap<String, Embedding>,
}

impl EmbeddingCache {
    /// Opens an existing cache file or starts empty when the file is absent.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (idx, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| RetrievalError::CacheIo {
                        path: path.clone(),
                        source,
                    })?;
                    let parsed: CacheLine = serde_json::from_str(&line)
                        .map_err(|source| RetrievalError::CacheParse { line: idx + 1, source })?;
                    if parsed.values.len() != parsed.dim {
                        return Err(RetrievalError::CacheParse {
                            line: idx + 1,
                            source: serde::de::Error::custom(format!(
                                "dim {} disagrees with {} values",
                                parsed.dim,
                                parsed.values.len()
                            )),
                        });
                    }
                    entries.insert(parsed.sha256, Embedding::new(parsed.values)?);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => return Err(RetrievalError::CacheIo { path, source }),
        }
        Ok(Self { path, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&Embedding> {
        self.entries.get(&text_key(text))
    }

    /// Returns the cached vector or embeds and caches it. A cached vector
    /// whose dimension disagrees with the provider is a hard error — it means
    /// the cache was produced by a different provider.
    pub fn get_or_embed(
        &mut self,
        text: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Embedding, RetrievalError> {
        if let Some(found) = self.get(text) {
            if found.dim() != provider.dim() {
                return Err(RetrievalError::DimensionMismatch {
                    expected: provider.dim(),
                    got: found.dim(),
                });
            }
            return Ok(found.clone());
        }
        let embedding = provider.embed(text)?;
        self.entries.insert(text_key(text), embedding.clone());
        Ok(embedding)
    }

    /// Writes every entry back to the cache file, sorted by key so the file
    /// is byte-stable across runs.
    pub fn save(&self) -> Result<(), RetrievalError> {
        let to_io = |source| RetrievalError::CacheIo {
            path: self.path.clone(),
            source,
        };
        let file = File::create(&self.path).map_err(to_io)?;
        let mut writer = BufWriter::new(file);
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort_unstable();
        for key in keys {
            let embedding = &self.entries[key];
            let line = CacheLine {
                sha256: key.clone(),
                dim: embedding.dim(),
                values: embedding.values().to_vec(),
            };
            writeln!(writer, "{}", serde_json::to_string(&line).expect("serializes"))
                .map_err(to_io)?;
        }
        writer.flush().map_err(to_io)
    }
}

/// One ranked candidate: who, how similar, and how many tokens its rendered
/// reference costs.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub incident_id: String,
    pub similarity: f64,
    pub token_len: usize,
}

/// Every retrieval-corpus incident ordered by similarity (descending),
/// ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

/// The references actually handed to the scorer for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub query_id: String,
    pub references: Vec<Incident>,
    pub k: usize,
    pub total_tokens: usize,
    pub budget: usize,
}

#[derive(Debug)]
struct IndexEntry {
    incident: Incident,
    embedding: Embedding,
    token_len: usize,
}

/// Exhaustive-scan retrieval index over a corpus whose incidents all carry a
/// root cause.
#[derive(Debug)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
    dim: usize,
}

impl RetrievalIndex {
    /// Embeds every description (through the cache when one is given) and
    /// precomputes reference token lengths.
    pub fn build(
        corpus: &Corpus,
        provider: &dyn EmbeddingProvider,
        mut cache: Option<&mut EmbeddingCache>,
    ) -> Result<Self, RetrievalError> {
        let mut entries = Vec::with_capacity(corpus.n_max());
        let mut by_id = HashMap::with_capacity(corpus.n_max());
        for incident in corpus.incidents() {
            if incident.root_cause.is_none() {
                return Err(RetrievalError::MissingRootCause {
                    id: incident.id.clone(),
                });
            }
            let embedding = match cache.as_deref_mut() {
                Some(cache) => cache.get_or_embed(&incident.description, provider)?,
                None => provider.embed(&incident.description)?,
            };
            if embedding.dim() != provider.dim() {
                return Err(RetrievalError::DimensionMismatch {
                    expected: provider.dim(),
                    got: embedding.dim(),
                });
            }
            by_id.insert(incident.id.clone(), entries.len());
            entries.push(IndexEntry {
                token_len: reference_token_len(incident),
                incident: incident.clone(),
                embedding,
            });
        }
        Ok(Self {
            entries,
            by_id,
            dim: provider.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ranks the whole index against a query embedding by inner product,
    /// descending; equal similarities order by ascending incident id.
    pub fn rank(&self, query: &Embedding) -> Result<RankedList, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut entries: Vec<RankedEntry> = self
            .entries
            .iter()
            .map(|e| {
                Ok(RankedEntry {
                    incident_id: e.incident.id.clone(),
                    similarity: query.dot(&e.embedding)?,
                    token_len: e.token_len,
                })
            })
            .collect::<Result<_, RetrievalError>>()?;
        entries.sort_unstable_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .expect("similarities are finite")
                .then_with(|| a.incident_id.cmp(&b.incident_id))
        });
        Ok(RankedList { entries })
    }

    /// Takes the longest ranked prefix whose summed token lengths stay within
    /// `budget`. An empty selection is valid (over-long top entry) and simply
    /// yields a low-evidence context.
    pub fn select_under_budget(
        &self,
        ranked: &RankedList,
        budget: usize,
        query_id: &str,
    ) -> RetrievedContext {
        let mut references = Vec::new();
        let mut total_tokens = 0usize;
        for entry in &ranked.entries {
            if total_tokens + entry.token_len > budget {
                break;
            }
            total_tokens += entry.token_len;
            let idx = self.by_id[&entry.incident_id];
            references.push(self.entries[idx].incident.clone());
        }
        RetrievedContext {
            query_id: query_id.to_string(),
            k: references.len(),
            references,
            total_tokens,
            budget,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Test provider returning preassigned vectors keyed by exact text.
    struct FixedEmbedder {
        vectors: HashMap<String, Vec<f64>>,
        dim: usize,
    }

    impl FixedEmbedder {
        fn new(pairs: &[(&str, &[f64])]) -> Self {
            let dim = pairs[0].1.len();
            Self {
                vectors: pairs
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_vec()))
                    .collect(),
                dim,
            }
        }
    }

    impl EmbeddingProvider for FixedEmbedder {
        fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
            Embedding::new(self.vectors[text].clone())
        }

        fn dim(&self) -> usize {
            self.dim
        }
    }

    fn incident(id: &str, description: &str) -> Incident {
        Incident {
            id: id.into(),
            description: description.into(),
            root_cause: Some(format!("cause of {id}")),
            service: None,
            severity: None,
            created_at: None,
        }
    }

    /// Incident whose rendered reference costs exactly `tokens` tokens.
    fn incident_with_tokens(id: &str, description_stem: &str, tokens: usize) -> Incident {
        let root_cause = "rc";
        let overhead = "Incident: \nRoot cause: \n\n".len() + root_cause.len();
        let target_bytes = tokens * 4;
        assert!(target_bytes > overhead + description_stem.len());
        let description =
            format!("{description_stem}{}", "x".repeat(target_bytes - overhead - description_stem.len()));
        let inc = Incident {
            id: id.into(),
            description,
            root_cause: Some(root_cause.into()),
            service: None,
            severity: None,
            created_at: None,
        };
        assert_eq!(reference_token_len(&inc), tokens);
        inc
    }

    #[test]
    fn mock_embedder_is_deterministic_and_sized() {
        let embedder = MockEmbedder::default();
        let a = embedder.embed("database connection pool exhausted").unwrap();
        let b = embedder.embed("database connection pool exhausted").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        let norm: f64 = a.values().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12, "mock vectors are unit norm");
    }

    #[test]
    fn mock_embedder_clusters_related_texts() {
        let embedder = MockEmbedder::default();
        let db1 = embedder.embed("database replica lag exceeded threshold").unwrap();
        let db2 = embedder.embed("database replica lag spiked during failover").unwrap();
        let net = embedder.embed("edge router dropped BGP session to peer").unwrap();
        let near = db1.dot(&db2).unwrap();
        let far = db1.dot(&net).unwrap();
        assert!(
            near > far,
            "related texts should score higher: near={near}, far={far}"
        );
    }

    #[test]
    fn mock_similarity_is_symmetric() {
        let embedder = MockEmbedder::default();
        let a = embedder.embed("cache eviction storm").unwrap();
        let b = embedder.embed("cert rotation missed").unwrap();
        assert_eq!(a.dot(&b).unwrap(), b.dot(&a).unwrap());
    }

    #[test]
    fn rank_orders_by_inner_product_then_id() {
        let provider = FixedEmbedder::new(&[
            ("qa", &[1.0, 0.0]),
            ("da", &[1.0, 0.0]),
            ("db", &[0.0, 1.0]),
            ("dc", &[0.5, 0.0]),
        ]);
        let corpus = Corpus::new(vec![
            incident("a", "da"),
            incident("b", "db"),
            incident("c", "dc"),
        ])
        .unwrap();
        let index = RetrievalIndex::build(&corpus, &provider, None).unwrap();
        let query = provider.embed("qa").unwrap();
        let ranked = index.rank(&query).unwrap();
        let order: Vec<(&str, f64)> = ranked
            .entries
            .iter()
            .map(|e| (e.incident_id.as_str(), e.similarity))
            .collect();
        assert_eq!(order, vec![("a", 1.0), ("c", 0.5), ("b", 0.0)]);
    }

    #[test]
    fn rank_breaks_ties_by_ascending_id() {
        let provider = FixedEmbedder::new(&[
            ("q", &[1.0]),
            ("same1", &[2.0]),
            ("same2", &[2.0]),
        ]);
        let corpus = Corpus::new(vec![incident("zz", "same1"), incident("aa", "same2")]).unwrap();
        let index = RetrievalIndex::build(&corpus, &provider, None).unwrap();
        let ranked = index.rank(&provider.embed("q").unwrap()).unwrap();
        let ids: Vec<&str> = ranked.entries.iter().map(|e| e.incident_id.as_str()).collect();
        assert_eq!(ids, vec!["aa", "zz"]);
    }

    #[test]
    fn rank_rejects_dimension_mismatch() {
        let provider = FixedEmbedder::new(&[("d", &[1.0, 0.0])]);
        let corpus = Corpus::new(vec![incident("a", "d")]).unwrap();
        let index = RetrievalIndex::build(&corpus, &provider, None).unwrap();
        let narrow = Embedding::new(vec![1.0]).unwrap();
        assert!(matches!(
            index.rank(&narrow),
            Err(RetrievalError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn budget_selection_takes_maximal_prefix() {
        let provider = FixedEmbedder::new(&[
            ("q", &[1.0]),
            ("d1", &[3.0]),
            ("d2", &[2.0]),
            ("d3", &[1.0]),
        ]);
        let corpus = Corpus::new(vec![
            incident_with_tokens("a", "d1", 1000),
            incident_with_tokens("b", "d2", 1500),
            incident_with_tokens("c", "d3", 900),
        ])
        .unwrap();
        // FixedEmbedder keys on full description text, which the helper pads.
        let provider = FixedEmbedder {
            vectors: corpus
                .incidents()
                .iter()
                .zip([3.0, 2.0, 1.0])
                .map(|(inc, sim)| (inc.description.clone(), vec![sim]))
                .chain(std::iter::once(("q".to_string(), vec![1.0])))
                .collect(),
            dim: provider.dim,
        };
        let index = RetrievalIndex::build(&corpus, &provider, None).unwrap();
        let ranked = index.rank(&provider.embed("q").unwrap()).unwrap();

        let ctx = index.select_under_budget(&ranked, 3000, "q1");
        assert_eq!(ctx.k, 2);
        assert_eq!(ctx.total_tokens, 2500);
        assert_eq!(ctx.references[0].id, "a");
        assert_eq!(ctx.references[1].id, "b");

        let tight = index.select_under_budget(&ranked, 500, "q2");
        assert_eq!(tight.k, 0);
        assert!(tight.references.is_empty());
        assert_eq!(tight.total_tokens, 0);

        let slack = index.select_under_budget(&ranked, 10_000, "q3");
        assert_eq!(slack.k, 3);
        assert_eq!(slack.total_tokens, 3400);
    }

    #[test]
    fn index_requires_root_cause() {
        let mut bare = incident("a", "desc");
        bare.root_cause = None;
        let corpus = Corpus::new(vec![bare]).unwrap();
        let err = RetrievalIndex::build(&corpus, &MockEmbedder::default(), None).unwrap_err();
        assert!(matches!(err, RetrievalError::MissingRootCause { ref id } if id == "a"));
    }

    #[test]
    fn cache_roundtrips_and_feeds_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        let embedder = MockEmbedder::default();

        let mut cache = EmbeddingCache::open(&path).unwrap();
        assert!(cache.is_empty());
        let first = cache.get_or_embed("disk pressure on node", &embedder).unwrap();
        cache.save().unwrap();

        let mut reopened = EmbeddingCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        let again = reopened.get_or_embed("disk pressure on node", &embedder).unwrap();
        assert_eq!(first, again);

        // The stored line carries the documented fields.
        let raw = std::fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
        assert_eq!(parsed["sha256"], text_key("disk pressure on node"));
        assert_eq!(parsed["dim"], 64);
        assert_eq!(parsed["values"].as_array().unwrap().len(), 64);
    }

    #[test]
    fn cache_rejects_provider_dimension_drift() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        let mut cache = EmbeddingCache::open(&path).unwrap();
        cache.get_or_embed("text", &MockEmbedder::new(16)).unwrap();
        let err = cache.get_or_embed("text", &MockEmbedder::new(64)).unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::DimensionMismatch { expected: 64, got: 16 }
        ));
    }

    #[test]
    fn reference_text_layout_is_fixed() {
        let inc = incident("a", "API timeouts");
        assert_eq!(
            reference_text(&inc),
            "Incident: API timeouts\nRoot cause: cause of a\n\n"
        );
    }

    proptest! {
        #[test]
        fn budget_invariants_hold(
            descs in proptest::collection::vec("[a-z]{1,60}", 1..20),
            budget in 0usize..200,
        ) {
            let embedder = MockEmbedder::new(16);
            let incidents: Vec<Incident> = descs
                .iter()
                .enumerate()
                .map(|(i, d)| incident(&format!("i{i:02}"), d))
                .collect();
            // Identical descriptions under distinct ids are fine; the corpus
            // only demands unique ids.
            let corpus = Corpus::new(incidents).unwrap();
            let index = RetrievalIndex::build(&corpus, &embedder, None).unwrap();
            let query = embedder.embed("service degraded").unwrap();
            let ranked = index.rank(&query).unwrap();

            prop_assert_eq!(ranked.entries.len(), corpus.n_max());
            for pair in ranked.entries.windows(2) {
                prop_assert!(pair[0].similarity >= pair[1].similarity);
                if pair[0].similarity == pair[1].similarity {
                    prop_assert!(pair[0].incident_id < pair[1].incident_id);
                }
            }

            let ctx = index.select_under_budget(&ranked, budget, "q");
            prop_assert!(ctx.total_tokens <= budget);
            prop_assert_eq!(ctx.k, ctx.references.len());
            if ctx.k < ranked.entries.len() {
                prop_assert!(ctx.total_tokens + ranked.entries[ctx.k].token_len > budget);
            }
            for (reference, entry) in ctx.references.iter().zip(&ranked.entries) {
                prop_assert_eq!(&reference.id, &entry.incident_id);
            }
        }
    }
}
