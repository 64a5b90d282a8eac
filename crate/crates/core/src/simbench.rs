//! Seeded synthetic benchmark: generates incident corpora and simulated
//! phase scores from a latent-correctness model, runs the fit/evaluate
//! pipeline over several ablation modes, and emits a JSON report plus
//! per-mode reliability and histogram files.
//!
//! The latent model gives each case a correctness propensity (`quality`,
//! mapped through a logistic link) and an independent `evidence` level
//! controlling how much the simulated scorer can actually verify. With
//! strong evidence the binary votes sharply separate correct from incorrect
//! predictions and the scale ratings track correctness; with weak evidence
//! the votes approach coin flips and the ratings drift optimistically
//! upward with widened variance — confidently rating answers it cannot
//! ground, which is exactly the failure mode the evidence votes exist to
//! catch. Validation and test draws differ mildly, mimicking a
//! chronological split: the test period has a slightly lower base accuracy
//! and noticeably weaker retrieval evidence. Calibrators keyed on evidence
//! keep their bins pinned near extreme accuracies and survive the drift;
//! rating-only and unfitted baselines pool heterogeneous cases into the
//! same bins and degrade.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calib::{
    assign_confidence, compute_ece, fit_calibration, reliability_report, uniform_baseline,
    CalibError, FitMode, ReliabilityTable, UniformMode,
};
use crate::corpus::{Corpus, CorpusError, Incident};
use crate::report::{
    write_histogram_csv, write_reliability_csv, write_reliability_svg, ReportError,
    ScoreHistogram,
};
use crate::scoring::{Mode, SamplingConfig, ScoreRecord};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("validation split is empty; set val_n ≥ 1")]
    EmptyValidation,
    #[error("validation labels are single-class (all {label}); the threshold fit needs both outcomes")]
    DegenerateValidation { label: u8 },
    #[error("invalid benchmark config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serializing report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ablation modes the benchmark can evaluate. The first four share one set
/// of simulated scores and differ only in calibration; the last two
/// re-simulate with a degraded scoring channel and fit their own models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Full,
    RceOnly,
    UniformCombined,
    UniformRceOnly,
    NoContext,
    NoAnalysis,
}

impl BenchMode {
    pub const ALL: [BenchMode; 6] = [
        BenchMode::Full,
        BenchMode::RceOnly,
        BenchMode::UniformCombined,
        BenchMode::UniformRceOnly,
        BenchMode::NoContext,
        BenchMode::NoAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Full => "full",
            BenchMode::RceOnly => "rce_only",
            BenchMode::UniformCombined => "uniform_combined",
            BenchMode::UniformRceOnly => "uniform_rce_only",
            BenchMode::NoContext => "no_context",
            BenchMode::NoAnalysis => "no_analysis",
        }
    }

    /// The scoring channel this mode evaluates. Calibration-side ablations
    /// reuse the full channel's scores.
    fn channel(self) -> Mode {
        match self {
            BenchMode::NoContext => Mode::NoContext,
            BenchMode::NoAnalysis => Mode::NoAnalysis,
            _ => Mode::Full,
        }
    }
}

impl std::str::FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchMode::ALL
            .into_iter()
            .find(|mode| mode.as_str() == s)
            .ok_or_else(|| format!("unknown benchmark mode `{s}`"))
    }
}

fn default_alpha() -> f64 {
    1.7
}
fn default_q0() -> f64 {
    0.0
}
fn default_val_n() -> usize {
    2000
}
fn default_test_n() -> usize {
    3000
}
fn default_seeds() -> Vec<u64> {
    vec![42]
}
fn default_modes() -> Vec<BenchMode> {
    BenchMode::ALL.to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Slope of the logistic link from latent quality to correctness.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Quality value at which correctness probability is 0.5.
    #[serde(default = "default_q0")]
    pub q0: f64,
    #[serde(default = "default_val_n")]
    pub val_n: usize,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<BenchMode>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            q0: default_q0(),
            val_n: default_val_n(),
            test_n: default_test_n(),
            seeds: default_seeds(),
            modes: default_modes(),
        }
    }
}

/// One simulated case's generative parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCase {
    /// Latent correctness propensity.
    pub quality: f64,
    /// How much of the case the scorer can verify from retrieved history;
    /// independent of quality.
    pub evidence: f64,
    /// logistic(alpha · (quality − q0)).
    pub p_correct: f64,
    pub true_label: u8,
    /// Per-vote probability that an evidence vote affirms the prediction.
    pub coe_rate: f64,
    /// Categorical distribution of a single scale rating over 1..=S.
    pub rce_dist: Vec<f64>,
}

const BENCH_S: u32 = 5;
const MODEL_BINS: usize = 5;
const EVAL_BINS: usize = 5;
const HIST_BINS: usize = 10;
const W_GRID_STEP: f64 = 0.01;
const BAND_LEVEL: f64 = 0.95;
/// Blend weight for the unfitted combined baseline: an even split, since the
/// baseline by definition skips weight search.
const UNIFORM_W: f64 = 0.5;

// Latent-model shape. Validation and test profiles differ, standing in for
// a chronological split: the test period's base accuracy dips and its
// retrieval evidence is noticeably weaker. Ratings separate correct from
// incorrect answers only when evidence is strong (well-grounded wrong
// answers rate at the very bottom of the scale); weak-evidence cases rate
// high regardless of correctness, so rating-value thresholds pool them with
// genuinely correct cases while the vote rate still tells them apart.
const TEST_QUALITY_SHIFT: f64 = -0.15;
const VAL_EVIDENCE_EXPONENT: f64 = 0.6;
const TEST_EVIDENCE_EXPONENT: f64 = 1.5;
/// Full swing of the vote rate around 0.5 at full evidence.
const COE_SEPARATION: f64 = 0.92;
const COE_WOBBLE: f64 = 0.05;
/// Distance (unit scale) between correct and incorrect rating locations at
/// full evidence. Large enough that well-grounded wrong answers rate near the
/// bottom of the scale, while the hallucination lift keeps weakly-grounded
/// cases rating high regardless of correctness.
const RCE_SEPARATION: f64 = 1.0;
/// Upward pull on ratings when evidence is weak: ungrounded answers still
/// sound plausible.
const HALLUCINATION_LIFT: f64 = 0.30;
const RCE_SPREAD_BASE: f64 = 0.40;
const RCE_SPREAD_BLUR: f64 = 0.80;
const RCE_WOBBLE_BASE: f64 = 0.04;
const RCE_WOBBLE_BLUR: f64 = 0.03;
/// Evidence retained when scoring without retrieved references.
const NO_CONTEXT_EVIDENCE: f64 = 0.12;
/// Evidence retained when scoring without intermediate analyses.
const NO_ANALYSIS_EVIDENCE: f64 = 0.55;
const NO_ANALYSIS_EXTRA_SPREAD: f64 = 0.35;

struct SplitProfile {
    quality_shift: f64,
    evidence_exponent: f64,
}

const VAL_PROFILE: SplitProfile = SplitProfile {
    quality_shift: 0.0,
    evidence_exponent: VAL_EVIDENCE_EXPONENT,
};
const TEST_PROFILE: SplitProfile = SplitProfile {
    quality_shift: TEST_QUALITY_SHIFT,
    evidence_exponent: TEST_EVIDENCE_EXPONENT,
};

fn bench_seed(master: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn correctness_probability(alpha: f64, q0: f64, quality: f64) -> f64 {
    1.0 / (1.0 + (-alpha * (quality - q0)).exp())
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws one case. The base variables (quality, evidence, label) depend only
/// on the rng stream and profile, so different scoring channels seeded with
/// the same case seed share the same underlying case.
fn draw_latent(
    alpha: f64,
    q0: f64,
    profile: &SplitProfile,
    channel: Mode,
    rng: &mut impl Rng,
) -> LatentCase {
    let quality = profile.quality_shift + standard_normal(rng);
    let raw_evidence: f64 = rng.random::<f64>().powf(profile.evidence_exponent);
    let p_correct = correctness_probability(alpha, q0, quality);
    let true_label = u8::from(rng.random::<f64>() < p_correct);
    let coe_wobble = standard_normal(rng);
    let rce_wobble = standard_normal(rng);

    let evidence = match channel {
        Mode::Full => raw_evidence,
        Mode::NoContext => raw_evidence * NO_CONTEXT_EVIDENCE,
        Mode::NoAnalysis => raw_evidence * NO_ANALYSIS_EVIDENCE,
    };
    latent_from_primitives(quality, evidence, p_correct, true_label, channel, coe_wobble, rce_wobble)
}

/// Deterministic tail of case construction, separated so tests can pin the
/// primitives directly.
fn latent_from_primitives(
    quality: f64,
    evidence: f64,
    p_correct: f64,
    true_label: u8,
    channel: Mode,
    coe_wobble: f64,
    rce_wobble: f64,
) -> LatentCase {
    let direction = if true_label == 1 { 1.0 } else { -1.0 };
    let coe_rate = (0.5 + direction * evidence * COE_SEPARATION / 2.0 + COE_WOBBLE * coe_wobble)
        .clamp(0.02, 0.98);

    // Rating location on the unit scale: separated by evidence, lifted when
    // evidence is weak, with case-level wobble that grows as evidence fades.
    let center = 0.5 + HALLUCINATION_LIFT * (1.0 - evidence);
    let wobble_scale = RCE_WOBBLE_BASE + RCE_WOBBLE_BLUR * (1.0 - evidence);
    let location_unit = (center + direction * evidence * RCE_SEPARATION / 2.0
        + wobble_scale * rce_wobble)
        .clamp(0.0, 1.0);
    let location = 1.0 + f64::from(BENCH_S - 1) * location_unit;
    let mut spread = RCE_SPREAD_BASE + RCE_SPREAD_BLUR * (1.0 - evidence);
    if channel == Mode::NoAnalysis {
        spread += NO_ANALYSIS_EXTRA_SPREAD;
    }

    let mut rce_dist: Vec<f64> = (1..=BENCH_S)
        .map(|k| {
            let z = (f64::from(k) - location) / spread;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = rce_dist.iter().sum();
    for weight in &mut rce_dist {
        *weight /= total;
    }

    LatentCase {
        quality,
        evidence,
        p_correct,
        true_label,
        coe_rate,
        rce_dist,
    }
}

fn sample_categorical(dist: &[f64], rng: &mut impl Rng) -> u32 {
    let draw: f64 = rng.random();
    let mut cumulative = 0.0;
    for (index, weight) in dist.iter().enumerate() {
        cumulative += weight;
        if draw < cumulative {
            return index as u32 + 1;
        }
    }
    dist.len() as u32
}

/// Samples a score record from the case's generative distributions: votes
/// i.i.d. Bernoulli(coe_rate), ratings i.i.d. from rce_dist. The no-analysis
/// channel collapses to a single sampling row per phase, matching the live
/// scorer's shape. Deterministic per seed.
pub fn simulate_scores(
    case: &LatentCase,
    cfg: &SamplingConfig,
    case_id: &str,
    mode: Mode,
    seed: u64,
) -> (ScoreRecord, u8) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vote_rows = if mode == Mode::NoAnalysis { 1 } else { cfg.k1 };
    let score_rows = if mode == Mode::NoAnalysis { 1 } else { cfg.k1p };

    let coe_votes: Vec<Vec<u8>> = (0..vote_rows)
        .map(|_| {
            (0..cfg.k2)
                .map(|_| u8::from(rng.random::<f64>() < case.coe_rate))
                .collect()
        })
        .collect();
    let rce_scores: Vec<Vec<u32>> = (0..score_rows)
        .map(|_| {
            (0..cfg.k2p)
                .map(|_| sample_categorical(&case.rce_dist, &mut rng))
                .collect()
        })
        .collect();

    let vote_count = (vote_rows * cfg.k2) as f64;
    let coe_mean = coe_votes
        .iter()
        .flatten()
        .map(|&v| f64::from(v))
        .sum::<f64>()
        / vote_count;
    let score_count = (score_rows * cfg.k2p) as f64;
    let rce_mean = rce_scores
        .iter()
        .flatten()
        .map(|&s| f64::from(s))
        .sum::<f64>()
        / score_count;

    let record = ScoreRecord {
        case_id: case_id.to_string(),
        mode,
        coe_votes,
        rce_scores,
        coe_mean,
        rce_mean,
        analyses: Vec::new(),
        parse_failures: 0,
    };
    (record, case.true_label)
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

struct TopicTemplate {
    name: &'static str,
    services: [&'static str; 4],
    symptom: &'static str,
    causes: [&'static str; 3],
}

const TOPICS: [TopicTemplate; 8] = [
    TopicTemplate {
        name: "database",
        services: ["orders-db", "billing-db", "users-db", "catalog-db"],
        symptom: "Database latency spike: p99 query time reached {n} ms and connection pool saturated",
        causes: [
            "connection pool exhausted by a slow analytical query missing an index",
            "autovacuum fell behind causing table bloat and sequential scans",
            "failover to replica with cold buffer cache",
        ],
    },
    TopicTemplate {
        name: "network",
        services: ["edge-gateway", "internal-lb", "vpn-hub", "service-mesh"],
        symptom: "Packet loss between availability zones measured at {n} percent on the east-west path",
        causes: [
            "misconfigured MTU after router firmware upgrade caused fragmentation drops",
            "BGP route flap withdrew the primary path for several minutes",
            "saturated cross-zone link due to unthrottled backup traffic",
        ],
    },
    TopicTemplate {
        name: "auth",
        services: ["sso-portal", "token-service", "ldap-bridge", "mfa-api"],
        symptom: "Authentication failures: {n} percent of login attempts rejected with expired-token errors",
        causes: [
            "signing key rotated without propagating to all validators",
            "clock skew on two nodes invalidated freshly issued tokens",
            "certificate chain expired on the identity provider endpoint",
        ],
    },
    TopicTemplate {
        name: "deploy",
        services: ["ci-runner", "release-bot", "canary-ctl", "fleet-rollout"],
        symptom: "Rollout stalled: {n} pods crash-looping after the latest release wave",
        causes: [
            "new image referenced a config schema field not yet migrated",
            "init container pinned to a registry that was being garbage-collected",
            "feature flag defaulted on in production but off in staging",
        ],
    },
    TopicTemplate {
        name: "storage",
        services: ["blob-store", "snapshot-svc", "archive-tier", "volume-mgr"],
        symptom: "Write errors on object storage: {n} requests per minute failing with quota exceeded",
        causes: [
            "lifecycle policy deleted the overflow bucket still referenced by writers",
            "per-account quota applied after tenant migration halved the limit",
            "disk pressure on one shard triggered aggressive throttling",
        ],
    },
    TopicTemplate {
        name: "cache",
        services: ["redis-main", "edge-cache", "session-store", "hot-keys"],
        symptom: "Cache hit rate dropped to {n} percent causing origin overload",
        causes: [
            "mass eviction after a deploy changed the key prefix",
            "memory limit lowered by config drift triggered LRU churn",
            "replication lag served stale entries that clients rejected",
        ],
    },
    TopicTemplate {
        name: "queue",
        services: ["event-bus", "task-queue", "stream-proc", "dlq-drain"],
        symptom: "Consumer lag grew to {n} thousand messages on the primary partition",
        causes: [
            "poison message repeatedly redelivered blocked the partition",
            "consumer group rebalancing storm after autoscaler flapping",
            "broker disk filled by an unbounded retention override",
        ],
    },
    TopicTemplate {
        name: "dns",
        services: ["resolver-fleet", "zone-publisher", "geo-dns", "discovery"],
        symptom: "DNS resolution failures: {n} percent SERVFAIL responses for internal zones",
        causes: [
            "zone transfer truncated by a size limit left secondaries stale",
            "negative-cache TTL misconfigured amplifying a brief outage",
            "resolver upgrade dropped support for the internal TSIG algorithm",
        ],
    },
];

/// Generates a deterministic corpus of templated incidents clustered into
/// `topics` topic groups. Same-topic incidents share a long template stem,
/// so they embed near each other under the character-n-gram mock embedder.
pub fn generate_corpus(seed: u64, n: usize, topics: usize) -> Result<Corpus, CorpusError> {
    assert!(topics >= 1, "at least one topic cluster is required");
    let mut rng = ChaCha8Rng::seed_from_u64(bench_seed(seed, &["corpus"]));
    let topic_count = topics.min(TOPICS.len());
    let incidents: Vec<Incident> = (0..n)
        .map(|i| {
            let topic = &TOPICS[i % topic_count];
            let service = topic.services[rng.random_range(0..topic.services.len())];
            let magnitude = rng.random_range(5..950);
            let cause = topic.causes[rng.random_range(0..topic.causes.len())];
            let month = rng.random_range(1..=12);
            let day = rng.random_range(1..=28);
            let hour = rng.random_range(0..24);
            Incident {
                id: format!("sim-{i:06}"),
                description: format!(
                    "[{}] {} on {service}. {}",
                    topic.name,
                    topic.symptom.replace("{n}", &magnitude.to_string()),
                    "Alert fired from the synthetic monitor; on-call paged."
                ),
                root_cause: Some(format!("{service}: {cause}")),
                service: Some(service.to_string()),
                severity: Some(rng.random_range(1..=4)),
                created_at: Some(format!("2024-{month:02}-{day:02}T{hour:02}:00:00Z")),
            }
        })
        .collect();
    Corpus::new(incidents)
}

// ---------------------------------------------------------------------------
// Benchmark driver
// ---------------------------------------------------------------------------

/// Aggregate benchmark results: per-seed, per-mode test ECE, plus the first
/// seed's reliability tables and confidence histograms for rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub seeds: Vec<u64>,
    pub modes: Vec<String>,
    /// Per mode: test ECE for each seed, aligned with `seeds`.
    pub ece: BTreeMap<String, Vec<f64>>,
    pub mean_ece: BTreeMap<String, f64>,
    /// First seed's per-mode reliability tables on test.
    pub reliability: BTreeMap<String, ReliabilityTable>,
    /// First seed's per-mode confidence histograms on test.
    pub histograms: BTreeMap<String, ScoreHistogram>,
}

/// Simulated (coe_mean, rce_mean, label) triples for one split and channel.
fn simulate_split(
    cfg: &BenchConfig,
    sampling: &SamplingConfig,
    profile: &SplitProfile,
    channel: Mode,
    seed: u64,
    split: &str,
    n: usize,
) -> Vec<(f64, f64, u8)> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let index = i.to_string();
            let case_id = format!("sim-{seed}-{split}-{i:05}");
            let mut case_rng =
                ChaCha8Rng::seed_from_u64(bench_seed(seed, &["case", split, &index]));
            let case = draw_latent(cfg.alpha, cfg.q0, profile, channel, &mut case_rng);
            let score_seed = bench_seed(seed, &["scores", split, &index, channel.to_string().as_str()]);
            let (record, label) = simulate_scores(&case, sampling, &case_id, channel, score_seed);
            (record.coe_mean, record.rce_mean, label)
        })
        .collect()
}

fn check_two_class(val: &[(f64, f64, u8)]) -> Result<(), BenchError> {
    let first = val[0].2;
    if val.iter().all(|&(_, _, label)| label == first) {
        return Err(BenchError::DegenerateValidation { label: first });
    }
    Ok(())
}

/// Runs the benchmark: per seed, simulate validation and test scores for
/// each required channel, fit calibration on validation, evaluate every
/// requested mode on test, and write `report.json`,
/// `reliability_<mode>.csv/.svg`, and `histograms_<mode>.csv` into
/// `out_dir`. Output is byte-identical across runs at fixed seeds.
pub fn run_benchmark(cfg: &BenchConfig, out_dir: &Path) -> Result<BenchReport, BenchError> {
    if cfg.val_n == 0 {
        return Err(BenchError::EmptyValidation);
    }
    if cfg.test_n == 0 {
        return Err(BenchError::InvalidConfig {
            reason: "test_n must be ≥ 1".into(),
        });
    }
    if cfg.seeds.is_empty() {
        return Err(BenchError::InvalidConfig {
            reason: "at least one seed is required".into(),
        });
    }
    let mut modes: Vec<BenchMode> = Vec::new();
    for &mode in &cfg.modes {
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    if modes.is_empty() {
        return Err(BenchError::InvalidConfig {
            reason: "at least one mode is required".into(),
        });
    }

    let sampling = bench_sampling();
    let mut ece: BTreeMap<String, Vec<f64>> = modes
        .iter()
        .map(|mode| (mode.as_str().to_string(), Vec::new()))
        .collect();
    let mut reliability = BTreeMap::new();
    let mut histograms = BTreeMap::new();

    for (seed_index, &seed) in cfg.seeds.iter().enumerate() {
        // Simulate each distinct channel once; calibration-side ablations
        // share the full channel's scores.
        let mut channels: Vec<Mode> = modes.iter().map(|m| m.channel()).collect();
        channels.sort_by_key(|c| c.to_string());
        channels.dedup();

        let mut val_by_channel: BTreeMap<String, Vec<(f64, f64, u8)>> = BTreeMap::new();
        let mut test_by_channel: BTreeMap<String, Vec<(f64, f64, u8)>> = BTreeMap::new();
        for &channel in &channels {
            let key = channel.to_string();
            let val = simulate_split(cfg, &sampling, &VAL_PROFILE, channel, seed, "val", cfg.val_n);
            check_two_class(&val)?;
            let test =
                simulate_split(cfg, &sampling, &TEST_PROFILE, channel, seed, "test", cfg.test_n);
            val_by_channel.insert(key.clone(), val);
            test_by_channel.insert(key, test);
        }

        // Fit once per distinct (channel, fit-mode) requirement.
        let mut fitted: BTreeMap<&str, crate::calib::CalibrationModel> = BTreeMap::new();
        for &mode in &modes {
            let fit_spec = match mode {
                BenchMode::Full => Some(("full", FitMode::Full)),
                BenchMode::RceOnly => Some(("rce_only", FitMode::RceOnly)),
                BenchMode::NoContext => Some(("no_context", FitMode::Full)),
                BenchMode::NoAnalysis => Some(("no_analysis", FitMode::Full)),
                _ => None,
            };
            if let Some((key, fit_mode)) = fit_spec {
                let val = &val_by_channel[&mode.channel().to_string()];
                let model = fit_calibration(val, MODEL_BINS, W_GRID_STEP, fit_mode, BENCH_S)?;
                fitted.insert(key, model);
            }
        }

        for &mode in &modes {
            let test = &test_by_channel[&mode.channel().to_string()];
            let assigned: Vec<(f64, u8)> = match mode {
                BenchMode::Full | BenchMode::RceOnly | BenchMode::NoContext | BenchMode::NoAnalysis => {
                    let model = &fitted[mode.as_str()];
                    test.iter()
                        .map(|&(coe, rce, label)| {
                            assign_confidence(model, "bench", coe, rce)
                                .map(|assigned| (assigned.psi, label))
                        })
                        .collect::<Result<_, _>>()?
                }
                BenchMode::UniformCombined | BenchMode::UniformRceOnly => {
                    let uniform_mode = if mode == BenchMode::UniformCombined {
                        UniformMode::Combined
                    } else {
                        UniformMode::RceOnly
                    };
                    test.iter()
                        .map(|&(coe, rce, label)| {
                            uniform_baseline("bench", coe, rce, UNIFORM_W, BENCH_S, uniform_mode, EVAL_BINS)
                                .map(|assigned| (assigned.psi, label))
                        })
                        .collect::<Result<_, _>>()?
                }
            };

            let report = compute_ece(&assigned, EVAL_BINS)?;
            ece.get_mut(mode.as_str()).expect("mode registered").push(report.ece);
            if seed_index == 0 {
                reliability.insert(
                    mode.as_str().to_string(),
                    reliability_report(&assigned, EVAL_BINS, BAND_LEVEL)?,
                );
                histograms.insert(
                    mode.as_str().to_string(),
                    ScoreHistogram::build(&assigned, HIST_BINS)?,
                );
            }
        }
    }

    let mean_ece: BTreeMap<String, f64> = ece
        .iter()
        .map(|(mode, values)| {
            (
                mode.clone(),
                values.iter().sum::<f64>() / values.len() as f64,
            )
        })
        .collect();

    let report = BenchReport {
        seeds: cfg.seeds.clone(),
        modes: modes.iter().map(|m| m.as_str().to_string()).collect(),
        ece,
        mean_ece,
        reliability,
        histograms,
    };
    write_report_files(&report, out_dir)?;
    Ok(report)
}

/// Sampling shape used by the simulated scorer: 16 completions per phase,
/// enough to separate the channels while keeping the distinct-score count
/// (and with it the threshold search) small.
fn bench_sampling() -> SamplingConfig {
    SamplingConfig {
        k1: 2,
        k2: 8,
        k1p: 2,
        k2p: 8,
        ..SamplingConfig::default()
    }
}

fn write_report_files(report: &BenchReport, out_dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(out_dir).map_err(|source| BenchError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let json_path = out_dir.join("report.json");
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    fs::write(&json_path, body).map_err(|source| BenchError::Io {
        path: json_path.clone(),
        source,
    })?;

    for mode in &report.modes {
        let table = &report.reliability[mode];
        write_reliability_csv(out_dir.join(format!("reliability_{mode}.csv")), table)?;
        write_reliability_svg(
            out_dir.join(format!("reliability_{mode}.svg")),
            table,
            &format!("test reliability — {mode}"),
        )?;
        write_histogram_csv(
            out_dir.join(format!("histograms_{mode}.csv")),
            &report.histograms[mode],
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_generation_is_deterministic_with_unique_ids() {
        let a = generate_corpus(7, 10, 4).unwrap();
        let b = generate_corpus(7, 10, 4).unwrap();
        assert_eq!(a.incidents().len(), 10);
        assert_eq!(
            serde_json::to_string(a.incidents()).unwrap(),
            serde_json::to_string(b.incidents()).unwrap()
        );
        let c = generate_corpus(8, 10, 4).unwrap();
        assert_ne!(
            serde_json::to_string(a.incidents()).unwrap(),
            serde_json::to_string(c.incidents()).unwrap()
        );
    }

    #[test]
    fn single_topic_corpus_shares_the_template_stem() {
        let corpus = generate_corpus(3, 6, 1).unwrap();
        for incident in corpus.incidents() {
            assert!(incident.description.starts_with("[database]"));
            assert!(incident.root_cause.is_some());
        }
    }

    #[test]
    fn label_frequency_tracks_the_logistic_link() {
        // At fixed quality the empirical correct fraction converges to
        // p_correct; the generator draws labels through the same link.
        let alpha = 1.7;
        let q0 = 0.0;
        let quality = 0.8;
        let p = correctness_probability(alpha, q0, quality);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| rng.random::<f64>() < p)
            .count();
        let empirical = hits as f64 / draws as f64;
        assert!((empirical - p).abs() < 0.03, "{empirical} vs {p}");
    }

    #[test]
    fn extreme_quality_saturates_the_link() {
        assert_eq!(correctness_probability(1.7, 0.0, 1e9), 1.0);
        assert_eq!(correctness_probability(1.7, 0.0, -1e9), 0.0);
        let case = latent_from_primitives(1e9, 0.5, 1.0, 1, Mode::Full, 0.0, 0.0);
        assert_eq!(case.true_label, 1);
    }

    #[test]
    fn rce_dist_is_a_probability_vector() {
        for evidence in [0.0, 0.3, 0.9] {
            for label in [0u8, 1] {
                let case =
                    latent_from_primitives(0.2, evidence, 0.6, label, Mode::Full, 0.4, -0.2);
                assert_eq!(case.rce_dist.len(), 5);
                let total: f64 = case.rce_dist.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(case.rce_dist.iter().all(|&w| w >= 0.0));
                assert!((0.02..=0.98).contains(&case.coe_rate));
            }
        }
    }

    #[test]
    fn saturated_vote_rate_gives_exact_unit_mean() {
        let mut case = latent_from_primitives(0.5, 0.9, 0.7, 1, Mode::Full, 0.0, 0.0);
        case.coe_rate = 1.0;
        let (record, label) = simulate_scores(&case, &bench_sampling(), "c", Mode::Full, 5);
        assert_eq!(record.coe_mean, 1.0);
        assert_eq!(label, 1);
        assert!(record.coe_votes.iter().flatten().all(|&v| v == 1));
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let case = latent_from_primitives(0.1, 0.6, 0.55, 1, Mode::Full, 0.3, 0.1);
        let cfg = bench_sampling();
        let (a, _) = simulate_scores(&case, &cfg, "c", Mode::Full, 99);
        let (b, _) = simulate_scores(&case, &cfg, "c", Mode::Full, 99);
        assert_eq!(a, b);
        let (c, _) = simulate_scores(&case, &cfg, "c", Mode::Full, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn no_analysis_channel_collapses_to_one_sampling_row() {
        let case = latent_from_primitives(0.1, 0.6, 0.55, 1, Mode::NoAnalysis, 0.3, 0.1);
        let cfg = bench_sampling();
        let (record, _) = simulate_scores(&case, &cfg, "c", Mode::NoAnalysis, 7);
        assert_eq!(record.coe_votes.len(), 1);
        assert_eq!(record.coe_votes[0].len(), cfg.k2);
        assert_eq!(record.rce_scores.len(), 1);
        assert_eq!(record.rce_scores[0].len(), cfg.k2p);
    }

    #[test]
    fn scale_ratings_shift_up_with_quality_for_correct_cases() {
        let low = latent_from_primitives(-1.0, 0.8, 0.2, 0, Mode::Full, 0.0, 0.0);
        let high = latent_from_primitives(1.5, 0.8, 0.9, 1, Mode::Full, 0.0, 0.0);
        let mean_of = |dist: &[f64]| -> f64 {
            dist.iter()
                .enumerate()
                .map(|(i, w)| (i as f64 + 1.0) * w)
                .sum()
        };
        assert!(mean_of(&high.rce_dist) > mean_of(&low.rce_dist) + 0.8);
    }

    #[test]
    fn weak_evidence_blurs_and_lifts_the_ratings() {
        let grounded_wrong = latent_from_primitives(-0.5, 0.95, 0.3, 0, Mode::Full, 0.0, 0.0);
        let hallucinated_wrong = latent_from_primitives(-0.5, 0.05, 0.3, 0, Mode::Full, 0.0, 0.0);
        let mean_of = |dist: &[f64]| -> f64 {
            dist.iter()
                .enumerate()
                .map(|(i, w)| (i as f64 + 1.0) * w)
                .sum()
        };
        let var_of = |dist: &[f64]| -> f64 {
            let mean = mean_of(dist);
            dist.iter()
                .enumerate()
                .map(|(i, w)| (i as f64 + 1.0 - mean).powi(2) * w)
                .sum()
        };
        // Without evidence the wrong answer is rated confidently anyway…
        assert!(mean_of(&hallucinated_wrong.rce_dist) > mean_of(&grounded_wrong.rce_dist) + 1.0);
        // …and with more variance, while its vote rate collapses to a coin.
        assert!(var_of(&hallucinated_wrong.rce_dist) > var_of(&grounded_wrong.rce_dist));
        assert!((hallucinated_wrong.coe_rate - 0.5).abs() < 0.05);
        assert!(grounded_wrong.coe_rate < 0.1);
    }

    #[test]
    fn benchmark_produces_all_modes_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            val_n: 240,
            test_n: 360,
            seeds: vec![42],
            ..BenchConfig::default()
        };
        let report = run_benchmark(&cfg, dir.path()).unwrap();
        assert_eq!(report.modes.len(), 6);
        for mode in &report.modes {
            let values = &report.ece[mode];
            assert_eq!(values.len(), 1);
            assert!(values[0].is_finite() && (0.0..=1.0).contains(&values[0]));
            assert!(report.reliability.contains_key(mode));
            assert!(report.histograms.contains_key(mode));
            assert!(dir.path().join(format!("reliability_{mode}.csv")).exists());
            assert!(dir.path().join(format!("reliability_{mode}.svg")).exists());
            assert!(dir.path().join(format!("histograms_{mode}.csv")).exists());
        }
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn benchmark_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            val_n: 180,
            test_n: 240,
            seeds: vec![5, 6],
            ..BenchConfig::default()
        };
        run_benchmark(&cfg, dir_a.path()).unwrap();
        run_benchmark(&cfg, dir_b.path()).unwrap();
        for name in ["report.json", "reliability_full.csv", "histograms_rce_only.csv"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between runs"
            );
        }
    }

    #[test]
    fn degenerate_validation_labels_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            // Saturate the link so every label is 1.
            q0: -1e6,
            val_n: 40,
            test_n: 40,
            seeds: vec![1],
            ..BenchConfig::default()
        };
        assert!(matches!(
            run_benchmark(&cfg, dir.path()),
            Err(BenchError::DegenerateValidation { label: 1 })
        ));
    }

    #[test]
    fn empty_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            val_n: 0,
            ..BenchConfig::default()
        };
        assert!(matches!(
            run_benchmark(&cfg, dir.path()),
            Err(BenchError::EmptyValidation)
        ));
    }

    #[test]
    #[ignore = "tuning probe: run explicitly to inspect 20-seed margins"]
    fn margin_probe_twenty_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let cfg = BenchConfig {
            seeds: (0..20).map(|i| 42 + i).collect(),
            modes: vec![
                BenchMode::Full,
                BenchMode::RceOnly,
                BenchMode::UniformCombined,
                BenchMode::UniformRceOnly,
            ],
            ..BenchConfig::default()
        };
        let report = run_benchmark(&cfg, dir.path()).unwrap();
        let mut wins = 0;
        for i in 0..20 {
            let full = report.ece["full"][i];
            let rce = report.ece["rce_only"][i];
            let uc = report.ece["uniform_combined"][i];
            let ur = report.ece["uniform_rce_only"][i];
            let win = full < rce && full < uc && full < ur;
            wins += usize::from(win);
            println!(
                "seed {:2}: full {:.4} rce {:.4} uniform_c {:.4} uniform_r {:.4} {}",
                report.seeds[i],
                full,
                rce,
                uc,
                ur,
                if win { "WIN" } else { "LOSS" }
            );
        }
        let max_full = report.ece["full"].iter().cloned().fold(0.0f64, f64::max);
        println!(
            "wins {wins}/20, mean full {:.4} rce {:.4} uc {:.4} ur {:.4}, max full {max_full:.4}, elapsed {:?}",
            report.mean_ece["full"],
            report.mean_ece["rce_only"],
            report.mean_ece["uniform_combined"],
            report.mean_ece["uniform_rce_only"],
            t0.elapsed()
        );
    }

    #[test]
    fn default_sizes_seed_42_reproduces_the_ablation_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            seeds: vec![42],
            modes: vec![
                BenchMode::Full,
                BenchMode::RceOnly,
                BenchMode::UniformCombined,
                BenchMode::UniformRceOnly,
            ],
            ..BenchConfig::default()
        };
        let report = run_benchmark(&cfg, dir.path()).unwrap();
        let ece_of = |mode: &str| report.ece[mode][0];
        assert!(ece_of("full") <= 0.10, "full ECE {}", ece_of("full"));
        assert!(
            ece_of("full") < ece_of("rce_only"),
            "full {} vs rce_only {}",
            ece_of("full"),
            ece_of("rce_only")
        );
        assert!(
            ece_of("full") < ece_of("uniform_combined"),
            "full {} vs uniform_combined {}",
            ece_of("full"),
            ece_of("uniform_combined")
        );
        assert!(
            ece_of("full") < ece_of("uniform_rce_only"),
            "full {} vs uniform_rce_only {}",
            ece_of("full"),
            ece_of("uniform_rce_only")
        );
    }
}
