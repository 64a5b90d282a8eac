//! Correctness labels for scored cases.
//!
//! Ground truth at scale comes from pseudo-labels: an LLM rates the
//! similarity of (ground-truth, predicted) root-cause pairs on a 1–3 scale,
//! many samples per case, and the per-case mean rating is thresholded into a
//! binary label. The threshold itself is fitted against a small
//! human-annotated set by maximizing F1. Human annotations (1–5 scale,
//! consensus of at least three labelers) can also be ingested directly.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError, Message};
use crate::scoring::parse_scale_score;

#[derive(Debug, Error)]
pub enum LabelsError {
    #[error("cannot rate empty root-cause text for case {case_id}")]
    EmptyText { case_id: String },
    #[error("case {case_id}: every sampled rating was unparseable")]
    AllRatingsUnparsable { case_id: String },
    #[error("threshold fitting needs both correct and incorrect examples")]
    DegenerateLabels,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("annotations file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotations line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("annotations line {line}: score {score} outside 1..=5")]
    ScoreOutOfRange { line: usize, score: u32 },
    #[error("annotations line {line}: {n_labelers} labelers, minimum is 3")]
    TooFewLabelers { line: usize, n_labelers: u32 },
}

/// The sampled similarity ratings for one case. `ratings` holds only the
/// parseable samples; `dropped` counts the rest, so
/// `ratings.len() + dropped == n_queries × n_per_query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRating {
    pub case_id: String,
    pub ratings: Vec<u32>,
    pub mean_rating: f64,
    pub n_queries: usize,
    pub n_per_query: usize,
    pub dropped: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Pseudo,
    Human,
}

/// A binary correctness verdict for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub case_id: String,
    pub label: u8,
    pub source: LabelSource,
}

/// One human-annotated case: a 1–5 similarity score agreed by `n_labelers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub case_id: String,
    pub score: u32,
    pub n_labelers: u32,
    pub consensus: bool,
}

/// Rating scale for pseudo-labels: 1 (unrelated) to 3 (same root cause).
pub const RATING_SCALE_MAX: u32 = 3;

fn rating_prompt(truth: &str, predicted: &str) -> String {
    format!(
        "Rate the similarity between the two root cause statements below on a scale of 1 to 3, \
         where 1 means unrelated, 2 means partially overlapping, and 3 means essentially the \
         same root cause. Reply with a single integer.\n\n\
         Reference root cause:\n{truth}\n\n\
         Proposed root cause:\n{predicted}\n"
    )
}

fn rating_seed(case_id: &str, query_index: usize) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(case_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(b"similarity-rating");
    hasher.update([0x1f]);
    hasher.update(query_index.to_le_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().expect("8 bytes"))
}

/// Samples `n_queries` requests of `n_per_query` ratings each for one
/// (ground-truth, predicted) pair and averages the parseable ones.
/// Unparseable ratings are dropped — a label threshold wants an unbiased
/// mean, not a floored one — and only an entirely unparseable case errors.
pub fn rate_similarity(
    case_id: &str,
    truth: &str,
    predicted: &str,
    gateway: &Gateway,
    n_queries: usize,
    n_per_query: usize,
) -> Result<SimilarityRating, LabelsError> {
    if truth.is_empty() || predicted.is_empty() {
        return Err(LabelsError::EmptyText {
            case_id: case_id.to_string(),
        });
    }
    assert!(n_queries >= 1 && n_per_query >= 1, "sample counts must be ≥ 1");

    let prompt = rating_prompt(truth, predicted);
    let mut ratings = Vec::with_capacity(n_queries * n_per_query);
    let mut dropped = 0u32;
    for query_index in 0..n_queries {
        let request = CompletionRequest {
            messages: vec![Message::user(prompt.clone())],
            temperature: 1.0,
            max_tokens: 16,
            n_samples: n_per_query,
            seed: rating_seed(case_id, query_index),
        };
        for completion in gateway.complete(&request)?.completions {
            match parse_scale_score(&completion, RATING_SCALE_MAX) {
                Ok(rating) => ratings.push(rating),
                Err(_) => dropped += 1,
            }
        }
    }
    if ratings.is_empty() {
        return Err(LabelsError::AllRatingsUnparsable {
            case_id: case_id.to_string(),
        });
    }
    let mean_rating = ratings.iter().map(|r| f64::from(*r)).sum::<f64>() / ratings.len() as f64;
    Ok(SimilarityRating {
        case_id: case_id.to_string(),
        ratings,
        mean_rating,
        n_queries,
        n_per_query,
        dropped,
    })
}

fn f1_at_threshold(data: &[(f64, u8)], threshold: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for &(rating, label) in data {
        let predicted = rating >= threshold;
        match (predicted, label) {
            (true, 1) => tp += 1,
            (true, _) => fp += 1,
            (false, 1) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Candidate thresholds: midpoints between consecutive distinct ratings,
/// plus one sentinel below the minimum (predict everything correct) and one
/// above the maximum (predict nothing correct).
fn threshold_candidates(data: &[(f64, u8)]) -> Vec<f64> {
    let mut values: Vec<f64> = data.iter().map(|(r, _)| *r).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite ratings"));
    values.dedup();
    let mut candidates = vec![values[0] - 1.0];
    candidates.extend(values.windows(2).map(|pair| (pair[0] + pair[1]) / 2.0));
    candidates.push(values[values.len() - 1] + 1.0);
    candidates
}

/// Fits the correctness cutoff on (mean_rating, human_label) pairs:
/// the threshold whose `rating ≥ t` rule maximizes F1, ties resolved toward
/// the smallest threshold. Returns `(threshold, f1)`.
pub fn fit_correctness_threshold(data: &[(f64, u8)]) -> Result<(f64, f64), LabelsError> {
    let positives = data.iter().filter(|(_, l)| *l == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(LabelsError::DegenerateLabels);
    }
    let mut best: Option<(f64, f64)> = None;
    for candidate in threshold_candidates(data) {
        let f1 = f1_at_threshold(data, candidate);
        let better = match best {
            None => true,
            // Strictly better F1 wins; equal F1 keeps the earlier (smaller)
            // candidate since candidates iterate in ascending order.
            Some((_, best_f1)) => f1 > best_f1,
        };
        if better {
            best = Some((candidate, f1));
        }
    }
    Ok(best.expect("candidate list is nonempty"))
}

/// Applies a fitted threshold: label 1 iff `mean_rating ≥ threshold`
/// (boundary inclusive).
pub fn label_cases(ratings: &[SimilarityRating], threshold: f64) -> Vec<LabeledCase> {
    assert!(threshold.is_finite(), "threshold must be finite");
    ratings
        .iter()
        .map(|r| LabeledCase {
            case_id: r.case_id.clone(),
            label: u8::from(r.mean_rating >= threshold),
            source: LabelSource::Pseudo,
        })
        .collect()
}

/// Maps a 1–5 human similarity score to a binary correctness label:
/// scores of `correct_min` (conventionally 4) and above count as correct.
pub fn human_to_binary(score: u32, correct_min: u32) -> u8 {
    u8::from(score >= correct_min)
}

/// Loads human annotations from JSON-Lines, validating the 1–5 score range
/// and the three-labeler minimum. Non-consensus records are kept — callers
/// decide whether to filter on the flag.
pub fn ingest_human_labels(path: impl AsRef<Path>) -> Result<Vec<HumanAnnotation>, LabelsError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| LabelsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut annotations = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| LabelsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let annotation: HumanAnnotation = serde_json::from_str(&line)
            .map_err(|source| LabelsError::Parse { line: line_no, source })?;
        if !(1..=5).contains(&annotation.score) {
            return Err(LabelsError::ScoreOutOfRange {
                line: line_no,
                score: annotation.score,
            });
        }
        if annotation.n_labelers < 3 {
            return Err(LabelsError::TooFewLabelers {
                line: line_no,
                n_labelers: annotation.n_labelers,
            });
        }
        annotations.push(annotation);
    }
    Ok(annotations)
}
