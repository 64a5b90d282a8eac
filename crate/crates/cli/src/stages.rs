//! Pipeline stage implementations. Each stage reads its inputs from the
//! configured paths, writes its artifacts under the output directory, and
//! returns a `StageOutcome` for the run manifest. Stages communicate only
//! through files, so any stage can be re-run in isolation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rootgauge_core::calib::{
    assign_confidence, compute_ece, fit_calibration, reliability_report, uniform_baseline,
    CalibrationModel, FitMode, UniformMode,
};
use rootgauge_core::corpus::{
    ingest_incidents, split_corpus, write_incidents, Corpus, Incident, SplitSpec,
};
use rootgauge_core::gateway::{
    Gateway, GatewayOptions, HttpBackend, RetryPolicy, Script, SimulatedBackend,
};
use rootgauge_core::labels::{
    fit_correctness_threshold, human_to_binary, ingest_human_labels, label_cases, rate_similarity,
    LabeledCase, SimilarityRating,
};
use rootgauge_core::report::{
    write_histogram_csv, write_reliability_csv, write_reliability_svg, ScoreHistogram,
};
use rootgauge_core::retrieval::{
    EmbeddingCache, EmbeddingProvider, HttpEmbedder, MockEmbedder, RetrievalIndex,
    RetrievedContext,
};
use rootgauge_core::scoring::{
    score_cases, scoring_config_hash, Mode, QueryCase, ScoreCache, StoredScore, TemplateSet,
};
use rootgauge_core::simbench::{run_benchmark, BenchMode};

use crate::config::Config;
use crate::manifest::StageOutcome;

/// Default pseudo-label cutoff on the 1–3 similarity scale when no fitted
/// threshold is available: means at or above it count as correct.
pub const DEFAULT_RATING_THRESHOLD: f64 = 2.3;

/// Histogram bins for score-distribution reports.
const HIST_BINS: usize = 10;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: malformed row", path.display(), i + 1))?,
        );
    }
    Ok(rows)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).context("serializing row")?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).context("serializing JSON")?;
    text.push(b'\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Builds the process-wide gateway from the configured backend. `sim://`
/// endpoints load a response script (path relative to the config file);
/// anything else is treated as an HTTP chat endpoint, whose credential is
/// read from the environment here — before any request goes out.
pub fn build_gateway(cfg: &Config) -> Result<Gateway> {
    ensure_dir(&cfg.paths.cache_dir)?;
    let options = GatewayOptions {
        max_in_flight: cfg.backend.max_in_flight,
        retry: RetryPolicy {
            max_attempts: cfg.backend.retry_max_attempts,
            base_delay: Duration::from_millis(cfg.backend.retry_base_delay_ms),
            max_delay: Duration::from_millis(cfg.backend.retry_max_delay_ms),
        },
        cache_path: Some(cfg.paths.cache_dir.join("responses.jsonl")),
    };

    let endpoint = cfg.backend.endpoint.as_str();
    if let Some(script_ref) = endpoint.strip_prefix("sim://") {
        let script_path = if Path::new(script_ref).is_absolute() {
            PathBuf::from(script_ref)
        } else {
            cfg.base_dir.join(script_ref)
        };
        let text = std::fs::read_to_string(&script_path)
            .with_context(|| format!("reading backend script {}", script_path.display()))?;
        let script: Script = serde_json::from_str(&text)
            .with_context(|| format!("parsing backend script {}", script_path.display()))?;
        let backend = SimulatedBackend::new(script, cfg.seeds.master)
            .with_context(|| format!("loading backend script {}", script_path.display()))?;
        return Ok(Gateway::new(Arc::new(backend), options)?);
    }

    let mut backend = HttpBackend::new(endpoint, cfg.backend.model_name.clone());
    if let Some(key) = cfg.backend_credential()? {
        backend = backend.with_api_key(key);
    }
    Ok(Gateway::new(Arc::new(backend), options)?)
}

fn build_embedder(cfg: &Config) -> Result<Box<dyn EmbeddingProvider>> {
    if cfg.embedder.endpoint == "mock" {
        return Ok(Box::new(MockEmbedder::new(cfg.embedder.dim)));
    }
    let mut embedder = HttpEmbedder::new(
        cfg.embedder.endpoint.clone(),
        cfg.embedder.model_name.clone(),
        cfg.embedder.dim,
    );
    if let Some(key) = cfg.backend_credential()? {
        embedder = embedder.with_api_key(key);
    }
    Ok(Box::new(embedder))
}

fn split_path(cfg: &Config, split: &str) -> PathBuf {
    cfg.paths.output_dir.join(format!("split_{split}.jsonl"))
}

fn contexts_path(cfg: &Config, split: &str) -> PathBuf {
    cfg.paths.output_dir.join(format!("contexts_{split}.jsonl"))
}

fn scores_path(cfg: &Config, split: &str, mode: Mode) -> PathBuf {
    let mode_tag = mode.to_string().replace('-', "_");
    cfg.paths
        .output_dir
        .join(format!("scores_{split}_{mode_tag}.jsonl"))
}

fn load_split(cfg: &Config, split: &str) -> Result<Corpus> {
    let path = split_path(cfg, split);
    ingest_incidents(&path)
        .with_context(|| format!("loading split `{split}` (run `split` first?)"))
}

/// One externally supplied root-cause prediction awaiting confidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted_root_cause: String,
    #[serde(default = "default_predictor")]
    pub predictor_id: String,
}

fn default_predictor() -> String {
    "external".to_string()
}

fn load_predictions(path: &Path) -> Result<HashMap<String, Prediction>> {
    let rows: Vec<Prediction> = read_jsonl(path)?;
    let mut by_id = HashMap::with_capacity(rows.len());
    for row in rows {
        if by_id.insert(row.id.clone(), row).is_some() {
            bail!("predictions file {}: duplicate id", path.display());
        }
    }
    Ok(by_id)
}

/// A confidence assignment joined with its evaluation label; one row of the
/// `assigned_<name>.jsonl` artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignedRow {
    pub case_id: String,
    pub pi_value: f64,
    pub bin_index: usize,
    pub psi: f64,
    pub label: u8,
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn ingest(cfg: &Config, input: &Path) -> Result<StageOutcome> {
    let corpus = ingest_incidents(input)
        .with_context(|| format!("ingesting {}", input.display()))?;
    if let Some(parent) = cfg.paths.corpus.parent() {
        ensure_dir(parent)?;
    }
    write_incidents(&cfg.paths.corpus, &corpus)?;
    println!(
        "ingested {} incidents -> {}",
        corpus.n_max(),
        cfg.paths.corpus.display()
    );
    Ok(StageOutcome::default()
        .input(input)
        .output(&cfg.paths.corpus))
}

pub struct SplitSizes {
    pub retrieval: Option<usize>,
    pub validation: Option<usize>,
    pub test: Option<usize>,
    pub seed: Option<u64>,
}

pub fn split(cfg: &Config, sizes: SplitSizes) -> Result<StageOutcome> {
    let corpus = ingest_incidents(&cfg.paths.corpus)
        .with_context(|| format!("loading corpus {}", cfg.paths.corpus.display()))?;
    let n = corpus.n_max();

    // Unspecified sizes default to a 60/20/20 split, with retrieval taking
    // whatever the other two leave.
    let validation_n = sizes.validation.unwrap_or(n / 5);
    let test_n = sizes.test.unwrap_or(n / 5);
    let retrieval_n = match sizes.retrieval {
        Some(r) => r,
        None => n
            .checked_sub(validation_n + test_n)
            .ok_or_else(|| anyhow!("validation {validation_n} + test {test_n} exceed corpus size {n}"))?,
    };
    let spec = SplitSpec {
        retrieval_n,
        validation_n,
        test_n,
        seed: sizes.seed.unwrap_or(cfg.seeds.split),
    };
    let (retrieval, validation, test) = split_corpus(&corpus, &spec)?;

    ensure_dir(&cfg.paths.output_dir)?;
    let mut outcome = StageOutcome::default().input(&cfg.paths.corpus);
    for (name, part) in [
        ("retrieval", &retrieval),
        ("validation", &validation),
        ("test", &test),
    ] {
        let path = split_path(cfg, name);
        write_incidents(&path, part)?;
        outcome = outcome.output(path);
    }
    println!(
        "split {n} incidents -> retrieval {retrieval_n} / validation {validation_n} / test {test_n} (seed {})",
        spec.seed
    );
    Ok(outcome)
}

/// Which query split(s) a stage operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Validation,
    Test,
    All,
}

impl SplitChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            SplitChoice::Validation => &["validation"],
            SplitChoice::Test => &["test"],
            SplitChoice::All => &["validation", "test"],
        }
    }
}

impl std::str::FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validation" => Ok(SplitChoice::Validation),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            other => Err(format!(
                "unknown split {other:?} (expected validation, test, or all)"
            )),
        }
    }
}

pub fn retrieve(cfg: &Config, choice: SplitChoice) -> Result<StageOutcome> {
    let retrieval_corpus = load_split(cfg, "retrieval")?;
    let embedder = build_embedder(cfg)?;
    ensure_dir(&cfg.paths.cache_dir)?;
    let cache_path = cfg.paths.cache_dir.join("embeddings.jsonl");
    let mut cache = EmbeddingCache::open(&cache_path)?;

    let index = RetrievalIndex::build(&retrieval_corpus, embedder.as_ref(), Some(&mut cache))?;
    let mut outcome = StageOutcome::default().input(split_path(cfg, "retrieval"));
    for split in choice.names() {
        let queries = load_split(cfg, split)?;
        let mut contexts = Vec::with_capacity(queries.n_max());
        for incident in queries.incidents() {
            let query = cache.get_or_embed(&incident.description, embedder.as_ref())?;
            let ranked = index.rank(&query)?;
            contexts.push(index.select_under_budget(&ranked, cfg.budget_l, &incident.id));
        }
        let path = contexts_path(cfg, split);
        write_jsonl(&path, &contexts)?;
        println!(
            "retrieved references for {} {split} queries -> {}",
            contexts.len(),
            path.display()
        );
        outcome = outcome.input(split_path(cfg, split)).output(path);
    }
    cache.save()?;
    Ok(outcome)
}

fn load_templates(cfg: &Config) -> Result<TemplateSet> {
    match &cfg.paths.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir)
            .with_context(|| format!("loading templates from {}", dir.display())),
        None => Ok(TemplateSet::builtin()),
    }
}

/// Joins a split's incidents with their retrieved contexts and external
/// predictions into scorable cases. Every incident must have both.
fn assemble_cases(
    cfg: &Config,
    split: &str,
    predictions: &HashMap<String, Prediction>,
) -> Result<Vec<(QueryCase, RetrievedContext)>> {
    let incidents = load_split(cfg, split)?;
    let ctx_path = contexts_path(cfg, split);
    let contexts: Vec<RetrievedContext> = read_jsonl(&ctx_path)
        .with_context(|| format!("loading contexts for `{split}` (run `retrieve` first?)"))?;
    let mut ctx_by_id: HashMap<String, RetrievedContext> = contexts
        .into_iter()
        .map(|c| (c.query_id.clone(), c))
        .collect();

    let mut cases = Vec::with_capacity(incidents.n_max());
    for incident in incidents.incidents() {
        let prediction = predictions
            .get(&incident.id)
            .ok_or_else(|| anyhow!("no prediction for incident `{}`", incident.id))?;
        let context = ctx_by_id
            .remove(&incident.id)
            .ok_or_else(|| anyhow!("no retrieved context for incident `{}`", incident.id))?;
        let case = QueryCase::new(
            incident.clone(),
            prediction.predicted_root_cause.clone(),
            prediction.predictor_id.clone(),
        )?;
        cases.push((case, context));
    }
    Ok(cases)
}

pub fn score(
    cfg: &Config,
    choice: SplitChoice,
    mode: Mode,
    predictions_path: &Path,
) -> Result<StageOutcome> {
    let predictions = load_predictions(predictions_path)?;
    let templates = load_templates(cfg)?;
    let gateway = build_gateway(cfg)?;
    let cache = ScoreCache::open(cfg.paths.cache_dir.join("scores_cache.jsonl"))?;
    let cfg_hash = scoring_config_hash(&cfg.sampling, &templates, gateway.backend_id());

    let mut outcome = StageOutcome::default().input(predictions_path);
    for split in choice.names() {
        let cases = assemble_cases(cfg, split, &predictions)?;
        let records = score_cases(&cases, &cfg.sampling, &gateway, &templates, mode, &cache)?;
        let stored: Vec<StoredScore> = records
            .iter()
            .map(|r| StoredScore {
                case_id: r.case_id.clone(),
                mode: r.mode,
                cfg_hash: cfg_hash.clone(),
                coe_votes: r.coe_votes.clone(),
                rce_scores: r.rce_scores.clone(),
                coe_mean: r.coe_mean,
                rce_mean: r.rce_mean,
            })
            .collect();
        let path = scores_path(cfg, split, mode);
        write_jsonl(&path, &stored)?;
        println!(
            "scored {} {split} cases in {mode} mode -> {}",
            stored.len(),
            path.display()
        );
        outcome = outcome
            .input(split_path(cfg, split))
            .input(contexts_path(cfg, split))
            .output(path);
    }
    Ok(outcome.calls(gateway.backend_calls()))
}

/// Reads the fitted rating threshold if `fit-threshold` has run.
fn stored_threshold(cfg: &Config) -> Result<Option<f64>> {
    let path = cfg.paths.output_dir.join("threshold.json");
    match std::fs::read_to_string(&path) {
        Ok(text) => {
            let stored: StoredThreshold = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            Ok(Some(stored.threshold))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredThreshold {
    threshold: f64,
    f1: f64,
    n_pairs: usize,
}

pub fn pseudo_label(
    cfg: &Config,
    choice: SplitChoice,
    threshold_flag: Option<f64>,
    n_queries: usize,
    n_per_query: usize,
    predictions_path: &Path,
) -> Result<StageOutcome> {
    let predictions = load_predictions(predictions_path)?;
    let gateway = build_gateway(cfg)?;
    let threshold = match threshold_flag {
        Some(t) => t,
        None => stored_threshold(cfg)?.unwrap_or(DEFAULT_RATING_THRESHOLD),
    };

    let mut outcome = StageOutcome::default().input(predictions_path);
    for split in choice.names() {
        let incidents = load_split(cfg, split)?;
        let pairs: Vec<(&Incident, &Prediction)> = incidents
            .incidents()
            .iter()
            .map(|incident| {
                let prediction = predictions
                    .get(&incident.id)
                    .ok_or_else(|| anyhow!("no prediction for incident `{}`", incident.id))?;
                if incident.root_cause.is_none() {
                    bail!(
                        "incident `{}` has no ground-truth root cause to rate against",
                        incident.id
                    );
                }
                Ok((incident, prediction))
            })
            .collect::<Result<_>>()?;

        let ratings: Vec<SimilarityRating> = pairs
            .par_iter()
            .map(|(incident, prediction)| {
                rate_similarity(
                    &incident.id,
                    incident.root_cause.as_deref().unwrap(),
                    &prediction.predicted_root_cause,
                    &gateway,
                    n_queries,
                    n_per_query,
                )
                .map_err(anyhow::Error::from)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<LabeledCase> = label_cases(&ratings, threshold);

        let ratings_path = cfg.paths.output_dir.join(format!("ratings_{split}.jsonl"));
        let labels_path = cfg.paths.output_dir.join(format!("labels_{split}.jsonl"));
        write_jsonl(&ratings_path, &ratings)?;
        write_jsonl(&labels_path, &labels)?;
        let positive = labels.iter().filter(|l| l.label == 1).count();
        println!(
            "pseudo-labeled {} {split} cases ({} correct at threshold {threshold}) -> {}",
            labels.len(),
            positive,
            labels_path.display()
        );
        outcome = outcome
            .input(split_path(cfg, split))
            .output(ratings_path)
            .output(labels_path);
    }
    Ok(outcome.calls(gateway.backend_calls()))
}

pub fn fit_threshold(cfg: &Config, annotations_path: &Path) -> Result<StageOutcome> {
    let ratings_path = cfg.paths.output_dir.join("ratings_validation.jsonl");
    let ratings: Vec<SimilarityRating> = read_jsonl(&ratings_path)
        .context("loading validation ratings (run `pseudo-label --split validation` first?)")?;
    let rating_by_id: HashMap<&str, f64> = ratings
        .iter()
        .map(|r| (r.case_id.as_str(), r.mean_rating))
        .collect();

    let annotations = ingest_human_labels(annotations_path)?;
    let mut data = Vec::new();
    for annotation in &annotations {
        let Some(&mean_rating) = rating_by_id.get(annotation.case_id.as_str()) else {
            continue;
        };
        data.push((mean_rating, human_to_binary(annotation.score, 4)));
    }
    if data.is_empty() {
        bail!(
            "no annotated case ids overlap the validation ratings ({} annotations read)",
            annotations.len()
        );
    }

    let (threshold, f1) = fit_correctness_threshold(&data)?;
    let stored = StoredThreshold {
        threshold,
        f1,
        n_pairs: data.len(),
    };
    let path = cfg.paths.output_dir.join("threshold.json");
    write_json_pretty(&path, &stored)?;
    println!(
        "fitted rating threshold {threshold} (F1 {f1:.3} on {} pairs) -> {}",
        data.len(),
        path.display()
    );
    Ok(StageOutcome::default()
        .input(ratings_path)
        .input(annotations_path)
        .output(path))
}

/// Joins stored scores with labels into `(coe_mean, rce_mean, label)` triples.
fn join_scores_labels(
    cfg: &Config,
    split: &str,
    mode: Mode,
) -> Result<Vec<(String, f64, f64, u8)>> {
    let scores_path = scores_path(cfg, split, mode);
    let scores: Vec<StoredScore> = read_jsonl(&scores_path)
        .with_context(|| format!("loading scores (run `score --split {split}` first?)"))?;
    let labels_path = cfg.paths.output_dir.join(format!("labels_{split}.jsonl"));
    let labels: Vec<LabeledCase> = read_jsonl(&labels_path)
        .with_context(|| format!("loading labels (run `pseudo-label --split {split}` first?)"))?;
    let label_by_id: HashMap<&str, u8> = labels
        .iter()
        .map(|l| (l.case_id.as_str(), l.label))
        .collect();

    let mut joined = Vec::with_capacity(scores.len());
    for score in &scores {
        let label = label_by_id
            .get(score.case_id.as_str())
            .ok_or_else(|| anyhow!("no label for scored case `{}`", score.case_id))?;
        joined.push((score.case_id.clone(), score.coe_mean, score.rce_mean, *label));
    }
    Ok(joined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    RceOnly,
}

impl Ablation {
    fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::RceOnly => "rce_only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "rce-only" => Ok(Ablation::RceOnly),
            other => Err(format!(
                "unknown ablation {other:?} (expected full or rce-only)"
            )),
        }
    }
}

pub fn calibrate(cfg: &Config, ablation: Ablation) -> Result<StageOutcome> {
    let joined = join_scores_labels(cfg, "validation", Mode::Full)?;
    let triples: Vec<(f64, f64, u8)> = joined
        .iter()
        .map(|&(_, coe, rce, label)| (coe, rce, label))
        .collect();

    let fit_mode = match ablation {
        Ablation::Full => FitMode::Full,
        Ablation::RceOnly => FitMode::RceOnly,
    };
    let model = fit_calibration(
        &triples,
        cfg.calibration.m,
        cfg.calibration.w_grid_step,
        fit_mode,
        cfg.sampling.rce_scale_max,
    )?;

    let path = cfg
        .paths
        .output_dir
        .join(format!("model_{}.json", ablation.tag()));
    model.save(&path)?;
    println!(
        "calibrated {} model on {} validation cases (w {:.2}, objective {:.4}) -> {}",
        ablation.tag(),
        triples.len(),
        model.w,
        model.objective,
        path.display()
    );
    Ok(StageOutcome::default()
        .input(scores_path(cfg, "validation", Mode::Full))
        .input(cfg.paths.output_dir.join("labels_validation.jsonl"))
        .output(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Uniform,
    UniformRceOnly,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Baseline::Uniform),
            "uniform-rce-only" => Ok(Baseline::UniformRceOnly),
            other => Err(format!(
                "unknown baseline {other:?} (expected uniform or uniform-rce-only)"
            )),
        }
    }
}

/// Blend weight for the uniform (uncalibrated) baseline: an even split
/// between the vote rate and the projected rating.
const UNIFORM_BASELINE_W: f64 = 0.5;

pub fn evaluate(
    cfg: &Config,
    baseline: Option<Baseline>,
    model_path: Option<&Path>,
) -> Result<StageOutcome> {
    let joined = join_scores_labels(cfg, "test", Mode::Full)?;
    let s = cfg.sampling.rce_scale_max;

    let mut outcome = StageOutcome::default()
        .input(scores_path(cfg, "test", Mode::Full))
        .input(cfg.paths.output_dir.join("labels_test.jsonl"));

    let (name, rows) = match baseline {
        Some(choice) => {
            let (name, mode) = match choice {
                Baseline::Uniform => ("uniform".to_string(), UniformMode::Combined),
                Baseline::UniformRceOnly => {
                    ("uniform_rce_only".to_string(), UniformMode::RceOnly)
                }
            };
            let rows = joined
                .iter()
                .map(|(id, coe, rce, label)| {
                    let assigned = uniform_baseline(
                        id,
                        *coe,
                        *rce,
                        UNIFORM_BASELINE_W,
                        s,
                        mode,
                        cfg.calibration.m_eval,
                    )?;
                    Ok(AssignedRow {
                        case_id: assigned.case_id,
                        pi_value: assigned.pi_value,
                        bin_index: assigned.bin_index,
                        psi: assigned.psi,
                        label: *label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (name, rows)
        }
        None => {
            let path = match model_path {
                Some(p) => p.to_path_buf(),
                None => cfg.paths.output_dir.join("model_full.json"),
            };
            let model = CalibrationModel::load(&path)
                .with_context(|| format!("loading model {} (run `calibrate` first?)", path.display()))?;
            // `model_full.json` evaluates as "full", `model_rce_only.json` as
            // "rce_only", anything else by its file stem.
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model");
            let name = stem.strip_prefix("model_").unwrap_or(stem).to_string();
            outcome = outcome.input(path.clone());
            let rows = joined
                .iter()
                .map(|(id, coe, rce, label)| {
                    let assigned = assign_confidence(&model, id, *coe, *rce)?;
                    Ok(AssignedRow {
                        case_id: assigned.case_id,
                        pi_value: assigned.pi_value,
                        bin_index: assigned.bin_index,
                        psi: assigned.psi,
                        label: *label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (name, rows)
        }
    };

    let pairs: Vec<(f64, u8)> = rows.iter().map(|r| (r.psi, r.label)).collect();
    let report = compute_ece(&pairs, cfg.calibration.m_eval)?;

    let assigned_path = cfg.paths.output_dir.join(format!("assigned_{name}.jsonl"));
    let eval_path = cfg
        .paths
        .output_dir
        .join(format!("evaluation_{name}.json"));
    write_jsonl(&assigned_path, &rows)?;
    write_json_pretty(&eval_path, &report)?;
    println!(
        "evaluated `{name}` on {} test cases: ECE {:.4} over {} bins -> {}",
        rows.len(),
        report.ece,
        report.m_bins,
        eval_path.display()
    );
    Ok(outcome.output(assigned_path).output(eval_path))
}

pub fn report(cfg: &Config) -> Result<StageOutcome> {
    let dir = &cfg.paths.output_dir;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let file_name = entry?.file_name();
        let Some(file_name) = file_name.to_str() else {
            continue;
        };
        if let Some(name) = file_name
            .strip_prefix("assigned_")
            .and_then(|rest| rest.strip_suffix(".jsonl"))
        {
            names.push(name.to_string());
        }
    }
    if names.is_empty() {
        bail!(
            "no assigned_<name>.jsonl files in {} (run `evaluate` first?)",
            dir.display()
        );
    }
    names.sort();

    #[derive(Serialize)]
    struct SummaryEntry {
        ece: f64,
        n: usize,
    }

    let mut outcome = StageOutcome::default();
    let mut summary = std::collections::BTreeMap::new();
    for name in &names {
        let assigned_path = dir.join(format!("assigned_{name}.jsonl"));
        let rows: Vec<AssignedRow> = read_jsonl(&assigned_path)?;
        let pairs: Vec<(f64, u8)> = rows.iter().map(|r| (r.psi, r.label)).collect();

        let table = reliability_report(&pairs, cfg.calibration.m_eval, cfg.calibration.band_level)?;
        let ece = compute_ece(&pairs, cfg.calibration.m_eval)?;
        let histogram = ScoreHistogram::build(&pairs, HIST_BINS)?;

        let csv_path = dir.join(format!("reliability_{name}.csv"));
        let svg_path = dir.join(format!("reliability_{name}.svg"));
        let hist_path = dir.join(format!("histograms_{name}.csv"));
        write_reliability_csv(&csv_path, &table)?;
        write_reliability_svg(&svg_path, &table, &format!("test reliability — {name}"))?;
        write_histogram_csv(&hist_path, &histogram)?;

        summary.insert(
            name.clone(),
            SummaryEntry {
                ece: ece.ece,
                n: rows.len(),
            },
        );
        outcome = outcome
            .input(assigned_path)
            .output(csv_path)
            .output(svg_path)
            .output(hist_path);
    }

    let summary_path = dir.join("summary.json");
    write_json_pretty(&summary_path, &summary)?;
    println!(
        "reported {} evaluation(s) -> {}",
        names.len(),
        summary_path.display()
    );
    Ok(outcome.output(summary_path))
}

pub fn simbench(
    cfg: &Config,
    seeds: Vec<u64>,
    modes: Option<Vec<BenchMode>>,
    out: Option<&Path>,
) -> Result<StageOutcome> {
    let mut bench_cfg = cfg.simbench.clone();
    if !seeds.is_empty() {
        bench_cfg.seeds = seeds;
    }
    if let Some(modes) = modes {
        bench_cfg.modes = modes;
    }

    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.paths.output_dir.join("simbench"),
    };
    ensure_dir(&out_dir)?;
    let report = run_benchmark(&bench_cfg, &out_dir)?;

    let mut outcome = StageOutcome::default().output(out_dir.join("report.json"));
    for mode in &report.modes {
        outcome = outcome.output(out_dir.join(format!("reliability_{mode}.csv")));
    }
    println!(
        "benchmark over {} seed(s), val {} / test {}:",
        report.seeds.len(),
        bench_cfg.val_n,
        bench_cfg.test_n
    );
    for (mode, mean) in &report.mean_ece {
        println!("  {mode:<20} mean ECE {mean:.4}");
    }
    Ok(outcome)
}
