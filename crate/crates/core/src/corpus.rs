//! Incident corpora: ingestion, validation, token accounting, and splits.
//!
//! Incidents are interchanged as JSON-Lines, one object per line:
//! `{"id": "...", "description": "...", "root_cause": "...", "service": "...",
//! "severity": 2, "created_at": "2023-01-01T00:00:00Z"}` with every field
//! beyond `id` and `description` optional.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed incident record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate incident id \"{id}\"{}", fmt_line(*.line))]
    DuplicateId { line: Option<usize>, id: String },
    #[error("invalid incident{}: {reason}", fmt_line(*.line))]
    InvalidIncident { line: Option<usize>, reason: String },
    #[error("split sizes sum to {requested} but corpus holds {available} incidents")]
    SplitTooLarge { requested: usize, available: usize },
}

fn fmt_line(line: Option<usize>) -> String {
    match line {
        Some(n) => format!(" (line {n})"),
        None => String::new(),
    }
}

/// One historical or query incident. `created_at` is an ISO-8601 timestamp
/// kept verbatim; nothing downstream interprets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl Incident {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be nonempty".into());
        }
        if self.description.is_empty() {
            return Err(format!("incident \"{}\": description must be nonempty", self.id));
        }
        Ok(())
    }
}

/// An ordered, id-unique collection of incidents. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    incidents: Vec<Incident>,
}

impl Corpus {
    /// Validates uniqueness of ids and per-incident invariants.
    pub fn new(incidents: Vec<Incident>) -> Result<Self, CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for incident in &incidents {
            incident
                .validate()
                .map_err(|reason| CorpusError::InvalidIncident { line: None, reason })?;
            if !seen.insert(incident.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line: None,
                    id: incident.id.clone(),
                });
            }
        }
        Ok(Self { incidents })
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    /// Number of incidents (the corpus size `n_max`).
    pub fn n_max(&self) -> usize {
        self.incidents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incidents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Incident> {
        self.incidents.iter().find(|i| i.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Incident> {
        self.incidents.iter()
    }
}

/// Requested sizes for a retrieval/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub retrieval_n: usize,
    pub validation_n: usize,
    pub test_n: usize,
    pub seed: u64,
}

/// Parses a JSON-Lines incident file. Line order is preserved; blank lines
/// are not tolerated (every line must be an incident object).
pub fn ingest_incidents(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut incidents = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let incident: Incident = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Parse { line: line_no, source })?;
        incident.validate().map_err(|reason| CorpusError::InvalidIncident {
            line: Some(line_no),
            reason,
        })?;
        if !seen.insert(incident.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: Some(line_no),
                id: incident.id,
            });
        }
        incidents.push(incident);
    }
    Ok(Corpus { incidents })
}

/// Writes a corpus back to JSON-Lines. `ingest_incidents` of the result
/// yields an equal corpus.
pub fn write_incidents(path: impl AsRef<Path>, corpus: &Corpus) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let to_io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(to_io)?;
    let mut writer = BufWriter::new(file);
    for incident in &corpus.incidents {
        let line = serde_json::to_string(incident).expect("incident serializes");
        writeln!(writer, "{line}").map_err(to_io)?;
    }
    writer.flush().map_err(to_io)
}

/// Seeded uniform shuffle followed by slicing into the three requested sizes.
/// The same corpus and seed always produce identical splits.
pub fn split_corpus(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let requested = spec.retrieval_n + spec.validation_n + spec.test_n;
    if requested > corpus.n_max() {
        return Err(CorpusError::SplitTooLarge {
            requested,
            available: corpus.n_max(),
        });
    }

    let mut shuffled: Vec<Incident> = corpus.incidents.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffled.shuffle(&mut rng);

    let mut rest = shuffled;
    let mut take = |n: usize| -> Corpus {
        let tail = rest.split_off(n);
        let head = std::mem::replace(&mut rest, tail);
        Corpus { incidents: head }
    };
    let retrieval = take(spec.retrieval_n);
    let validation = take(spec.validation_n);
    let test = take(spec.test_n);
    Ok((retrieval, validation, test))
}

/// Token counting backend. The default approximation is `ceil(bytes / 4)`;
/// swap in a backend-exact tokenizer when budget accounting must match a
/// specific model.
pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// `ceil(byte_length / 4)` heuristic tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristicTokenizer;

impl Tokenizer for ByteHeuristicTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// Counts tokens with the default heuristic tokenizer.
pub fn count_tokens(text: &str) -> usize {
    ByteHeuristicTokenizer.count_tokens(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn incident(id: &str) -> Incident {
        Incident {
            id: id.into(),
            description: format!("incident {id}"),
            root_cause: Some(format!("root cause {id}")),
            service: None,
            severity: None,
            created_at: None,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn ingest_counts_lines() {
        let file = write_lines(&[
            r#"{"id": "a", "description": "disk full", "root_cause": "quota"}"#,
            r#"{"id": "b", "description": "latency spike"}"#,
            r#"{"id": "c", "description": "pods crash", "severity": 1}"#,
        ]);
        let corpus = ingest_incidents(file.path()).unwrap();
        assert_eq!(corpus.n_max(), 3);
        assert_eq!(corpus.incidents()[1].id, "b");
    }

    #[test]
    fn ingest_empty_file() {
        let file = write_lines(&[]);
        let corpus = ingest_incidents(file.path()).unwrap();
        assert_eq!(corpus.n_max(), 0);
    }

    #[test]
    fn ingest_rejects_duplicate_id() {
        let file = write_lines(&[
            r#"{"id": "inc-1", "description": "first"}"#,
            r#"{"id": "inc-1", "description": "second"}"#,
        ]);
        let err = ingest_incidents(file.path()).unwrap_err();
        match err {
            CorpusError::DuplicateId { line, ref id } => {
                assert_eq!(line, Some(2));
                assert_eq!(id, "inc-1");
            }
            other => panic!("unexpected error: {other}"),
        }
        assert!(err.to_string().contains("inc-1"));
    }

    #[test]
    fn ingest_reports_malformed_line_number() {
        let file = write_lines(&[
            r#"{"id": "a", "description": "ok"}"#,
            r#"{"id": "b", "description": }"#,
        ]);
        let err = ingest_incidents(file.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn ingest_rejects_empty_description() {
        let file = write_lines(&[r#"{"id": "a", "description": ""}"#]);
        let err = ingest_incidents(file.path()).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidIncident { line: Some(1), .. }));
    }

    #[test]
    fn split_produces_requested_disjoint_sizes() {
        let corpus = Corpus::new((0..10).map(|i| incident(&format!("i{i}"))).collect()).unwrap();
        let spec = SplitSpec {
            retrieval_n: 6,
            validation_n: 2,
            test_n: 2,
            seed: 1,
        };
        let (r, v, t) = split_corpus(&corpus, &spec).unwrap();
        assert_eq!((r.n_max(), v.n_max(), t.n_max()), (6, 2, 2));
        let mut ids: Vec<&str> = r
            .incidents()
            .iter()
            .chain(v.incidents())
            .chain(t.incidents())
            .map(|i| i.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10, "partitions overlap");
    }

    #[test]
    fn split_rejects_oversized_spec() {
        let corpus = Corpus::new((0..9).map(|i| incident(&format!("i{i}"))).collect()).unwrap();
        let spec = SplitSpec {
            retrieval_n: 6,
            validation_n: 2,
            test_n: 2,
            seed: 0,
        };
        assert!(matches!(
            split_corpus(&corpus, &spec),
            Err(CorpusError::SplitTooLarge { requested: 10, available: 9 })
        ));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let corpus = Corpus::new((0..20).map(|i| incident(&format!("i{i}"))).collect()).unwrap();
        let spec = SplitSpec {
            retrieval_n: 12,
            validation_n: 4,
            test_n: 4,
            seed: 7,
        };
        let a = split_corpus(&corpus, &spec).unwrap();
        let b = split_corpus(&corpus, &spec).unwrap();
        assert_eq!(a, b);
        let other = split_corpus(
            &corpus,
            &SplitSpec {
                seed: 8,
                ..spec
            },
        )
        .unwrap();
        assert_ne!(a, other, "different seeds should shuffle differently");
    }

    #[test]
    fn token_counts_follow_byte_ceiling() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("abcd"), 1);
        assert_eq!(count_tokens("abcde"), 2);
        // multi-byte text counts bytes, not chars
        assert_eq!(count_tokens("héllo"), 2);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_corpus(n in 0usize..20) {
            let corpus = Corpus::new((0..n).map(|i| incident(&format!("i{i}"))).collect()).unwrap();
            let file = tempfile::NamedTempFile::new().unwrap();
            write_incidents(file.path(), &corpus).unwrap();
            let back = ingest_incidents(file.path()).unwrap();
            prop_assert_eq!(corpus, back);
        }

        #[test]
        fn token_count_monotone_under_concat(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            prop_assert!(count_tokens(&joined) >= count_tokens(&a));
            prop_assert!(count_tokens(&joined) >= count_tokens(&b));
        }

        #[test]
        fn split_union_is_subset_with_exact_sizes(
            n in 0usize..30,
            r in 0usize..12,
            v in 0usize..6,
            t in 0usize..6,
            seed in 0u64..100,
        ) {
            let corpus = Corpus::new((0..n).map(|i| incident(&format!("i{i}"))).collect()).unwrap();
            let spec = SplitSpec { retrieval_n: r, validation_n: v, test_n: t, seed };
            match split_corpus(&corpus, &spec) {
                Ok((cr, cv, ct)) => {
                    prop_assert!(r + v + t <= n);
                    prop_assert_eq!((cr.n_max(), cv.n_max(), ct.n_max()), (r, v, t));
                    for inc in cr.incidents().iter().chain(cv.incidents()).chain(ct.incidents()) {
                        prop_assert!(corpus.get(&inc.id).is_some());
                    }
                }
                Err(_) => prop_assert!(r + v + t > n),
            }
        }
    }
}
