//! Two-phase confidence scoring of predicted root causes.
//!
//! Phase one (COE, confidence-of-evaluation) asks whether the retrieved
//! references give enough evidence to judge the incident at all: sampled
//! analyses, then binary A/Yes = 1, B/No = 0 votes, averaged into a mean in
//! [0,1]. Phase two (RCE, root-cause evaluation) rates the candidate root
//! cause against the references on an integer scale, averaged into a mean in
//! [1,S]. Both phases render editable prompt templates, sample through the
//! gateway, and parse completions defensively: a failed parse is resampled
//! once and then floored (0 for votes, 1 for ratings) with a surfaced
//! warning count, biasing confidence downward rather than upward.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Incident;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, Message};
use crate::retrieval::{reference_text, RetrievedContext};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("invalid sampling config: {reason}")]
    InvalidConfig { reason: String },
    #[error("template {id}: {reason}")]
    BadTemplate { id: TemplateId, reason: String },
    #[error("template {id} requires a value for placeholder \"{placeholder}\"")]
    MissingPlaceholder { id: TemplateId, placeholder: &'static str },
    #[error("no A/B choice found in completion: {excerpt:?}")]
    UnparsableVote { excerpt: String },
    #[error("no integer in [1,{scale_max}] found in completion: {excerpt:?}")]
    UnparsableScore { scale_max: u32, excerpt: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("template file {path}: {source}")]
    TemplateIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("score cache {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("score cache line {line}: {source}")]
    CacheParse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One incident plus the black-box prediction being scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub incident: Incident,
    pub predicted_root_cause: String,
    pub predictor_id: String,
}

impl QueryCase {
    pub fn new(
        incident: Incident,
        predicted_root_cause: impl Into<String>,
        predictor_id: impl Into<String>,
    ) -> Result<Self, ScoringError> {
        let predicted_root_cause = predicted_root_cause.into();
        if predicted_root_cause.is_empty() {
            return Err(ScoringError::InvalidConfig {
                reason: format!("case {}: predicted root cause is empty", incident.id),
            });
        }
        Ok(Self {
            incident,
            predicted_root_cause,
            predictor_id: predictor_id.into(),
        })
    }

    pub fn case_id(&self) -> &str {
        &self.incident.id
    }
}

/// Sample counts and generation parameters for both phases: k1 COE analyses
/// with k2 votes each, k1p RCE analyses with k2p ratings each, on a
/// 1..=rce_scale_max rating scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k1: usize,
    pub k2: usize,
    pub k1p: usize,
    pub k2p: usize,
    pub temperature: f64,
    pub analysis_max_tokens: usize,
    pub score_max_tokens: usize,
    pub rce_scale_max: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k1: 4,
            k2: 8,
            k1p: 4,
            k2p: 8,
            temperature: 1.0,
            analysis_max_tokens: 256,
            score_max_tokens: 16,
            rce_scale_max: 5,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let bad = |reason: &str| {
            Err(ScoringError::InvalidConfig {
                reason: reason.to_string(),
            })
        };
        if self.k1 == 0 || self.k2 == 0 || self.k1p == 0 || self.k2p == 0 {
            return bad("sample counts k1, k2, k1p, k2p must all be ≥ 1");
        }
        if self.rce_scale_max < 2 {
            return bad("rce_scale_max must be ≥ 2");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be ≥ 0");
        }
        Ok(())
    }
}

/// Ablation switches: `NoContext` scores without retrieved references,
/// `NoAnalysis` skips the intermediate analysis and votes/rates directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    NoContext,
    NoAnalysis,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoContext => "no-context",
            Mode::NoAnalysis => "no-analysis",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "no-context" => Ok(Mode::NoContext),
            "no-analysis" => Ok(Mode::NoAnalysis),
            other => Err(format!(
                "unknown mode {other:?} (expected full, no-context, or no-analysis)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Coe,
    Rce,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Coe => "COE",
            Phase::Rce => "RCE",
        })
    }
}

/// One sampled free-text analysis. `text` is only empty in no-analysis mode,
/// where the record exists purely to fill the prompt placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecord {
    pub phase: Phase,
    pub text: String,
    pub index: usize,
}

/// The complete scoring outcome for one case in one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub case_id: String,
    pub mode: Mode,
    pub coe_votes: Vec<Vec<u8>>,
    pub rce_scores: Vec<Vec<u32>>,
    pub coe_mean: f64,
    pub rce_mean: f64,
    pub analyses: Vec<AnalysisRecord>,
    pub parse_failures: u32,
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    CoeAnalysis,
    CoeScore,
    RceAnalysis,
    RceScore,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::CoeAnalysis => "COE_ANALYSIS",
            TemplateId::CoeScore => "COE_SCORE",
            TemplateId::RceAnalysis => "RCE_ANALYSIS",
            TemplateId::RceScore => "RCE_SCORE",
        })
    }
}

pub const PLACEHOLDER_REFERENCES: &str = "references";
pub const PLACEHOLDER_INCIDENT: &str = "incident";
pub const PLACEHOLDER_CANDIDATE: &str = "candidate_root_cause";
pub const PLACEHOLDER_ANALYSIS: &str = "analysis";

const ALL_PLACEHOLDERS: [&str; 4] = [
    PLACEHOLDER_REFERENCES,
    PLACEHOLDER_INCIDENT,
    PLACEHOLDER_CANDIDATE,
    PLACEHOLDER_ANALYSIS,
];

impl TemplateId {
    /// The exact placeholder set each template must mention.
    fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::CoeAnalysis => &[PLACEHOLDER_REFERENCES, PLACEHOLDER_INCIDENT],
            TemplateId::CoeScore => &[
                PLACEHOLDER_REFERENCES,
                PLACEHOLDER_INCIDENT,
                PLACEHOLDER_ANALYSIS,
            ],
            TemplateId::RceAnalysis => &[
                PLACEHOLDER_REFERENCES,
                PLACEHOLDER_INCIDENT,
                PLACEHOLDER_CANDIDATE,
            ],
            TemplateId::RceScore => &[
                PLACEHOLDER_REFERENCES,
                PLACEHOLDER_INCIDENT,
                PLACEHOLDER_CANDIDATE,
                PLACEHOLDER_ANALYSIS,
            ],
        }
    }
}

/// A prompt body with `{placeholder}` slots, validated on construction:
/// the body must mention exactly the placeholders its template id requires
/// (repeats allowed, other brace text ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self, ScoringError> {
        let body = body.into();
        let required = id.required_placeholders();
        for name in ALL_PLACEHOLDERS {
            let present = body.contains(&format!("{{{name}}}"));
            let needed = required.contains(&name);
            if needed && !present {
                return Err(ScoringError::BadTemplate {
                    id,
                    reason: format!("missing required placeholder {{{name}}}"),
                });
            }
            if present && !needed {
                return Err(ScoringError::BadTemplate {
                    id,
                    reason: format!("placeholder {{{name}}} is not allowed here"),
                });
            }
        }
        Ok(Self { id, body })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }
}

/// The four templates a scoring run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub coe_analysis: PromptTemplate,
    pub coe_score: PromptTemplate,
    pub rce_analysis: PromptTemplate,
    pub rce_score: PromptTemplate,
}

impl TemplateSet {
    /// Built-in templates. The RCE scoring rubric spells out "a scale of
    /// 1 to 5"; runs with a different `rce_scale_max` should supply custom
    /// templates via `from_dir`.
    pub fn builtin() -> Self {
        let load = |id, text| PromptTemplate::new(id, text).expect("builtin template is valid");
        Self {
            coe_analysis: load(
                TemplateId::CoeAnalysis,
                include_str!("../templates/coe_analysis.txt"),
            ),
            coe_score: load(TemplateId::CoeScore, include_str!("../templates/coe_score.txt")),
            rce_analysis: load(
                TemplateId::RceAnalysis,
                include_str!("../templates/rce_analysis.txt"),
            ),
            rce_score: load(TemplateId::RceScore, include_str!("../templates/rce_score.txt")),
        }
    }

    /// Loads `coe_analysis.txt`, `coe_score.txt`, `rce_analysis.txt`,
    /// `rce_score.txt` from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, ScoringError> {
        let dir = dir.as_ref();
        let load = |id: TemplateId, file: &str| -> Result<PromptTemplate, ScoringError> {
            let path = dir.join(file);
            let text = std::fs::read_to_string(&path)
                .map_err(|source| ScoringError::TemplateIo { path, source })?;
            PromptTemplate::new(id, text)
        };
        Ok(Self {
            coe_analysis: load(TemplateId::CoeAnalysis, "coe_analysis.txt")?,
            coe_score: load(TemplateId::CoeScore, "coe_score.txt")?,
            rce_analysis: load(TemplateId::RceAnalysis, "rce_analysis.txt")?,
            rce_score: load(TemplateId::RceScore, "rce_score.txt")?,
        })
    }

    fn bodies_digest(&self) -> [&str; 4] {
        [
            self.coe_analysis.body(),
            self.coe_score.body(),
            self.rce_analysis.body(),
            self.rce_score.body(),
        ]
    }
}

/// The line rendered when no references fit the budget (or retrieval was
/// ablated away).
pub const NO_REFERENCES_LINE: &str = "No historical incidents available.";

/// Fills a template from the retrieved context and case. References render
/// in rank order with the serialization retrieval fixed; an empty context
/// renders `NO_REFERENCES_LINE` instead.
pub fn render_prompt(
    template: &PromptTemplate,
    context: &RetrievedContext,
    case: &QueryCase,
    analysis: Option<&AnalysisRecord>,
) -> Result<String, ScoringError> {
    let references = if context.references.is_empty() {
        NO_REFERENCES_LINE.to_string()
    } else {
        context.references.iter().map(reference_text).collect()
    };
    let mut rendered = template.body().to_string();
    rendered = rendered.replace(&format!("{{{PLACEHOLDER_REFERENCES}}}"), references.trim_end());
    rendered = rendered.replace(&format!("{{{PLACEHOLDER_INCIDENT}}}"), &case.incident.description);
    rendered = rendered.replace(&format!("{{{PLACEHOLDER_CANDIDATE}}}"), &case.predicted_root_cause);
    if template
        .id()
        .required_placeholders()
        .contains(&PLACEHOLDER_ANALYSIS)
    {
        let analysis = analysis.ok_or(ScoringError::MissingPlaceholder {
            id: template.id(),
            placeholder: PLACEHOLDER_ANALYSIS,
        })?;
        rendered = rendered.replace(&format!("{{{PLACEHOLDER_ANALYSIS}}}"), &analysis.text);
    }
    Ok(rendered)
}

// ---------------------------------------------------------------------------
// Completion parsers
// ---------------------------------------------------------------------------

/// Extracts a binary vote: the first whitespace-delimited token equal to
/// "A"/"B" (case-insensitive) after shedding trailing '.', ')' or ':' marks.
/// A → 1 (yes, evidence suffices), B → 0.
pub fn parse_coe_choice(text: &str) -> Result<u8, ScoringError> {
    for token in text.split_whitespace() {
        let stripped = token.trim_end_matches(['.', ')', ':']);
        if stripped.eq_ignore_ascii_case("a") {
            return Ok(1);
        }
        if stripped.eq_ignore_ascii_case("b") {
            return Ok(0);
        }
    }
    Err(ScoringError::UnparsableVote {
        excerpt: text.chars().take(80).collect(),
    })
}

/// Extracts the first integer literal (maximal digit run) and checks it
/// against `[1, scale_max]`. An out-of-range first integer is an error, not
/// an invitation to keep scanning.
pub fn parse_scale_score(text: &str, scale_max: u32) -> Result<u32, ScoringError> {
    let fail = || ScoringError::UnparsableScore {
        scale_max,
        excerpt: text.chars().take(80).collect(),
    };
    let start = text.find(|c: char| c.is_ascii_digit()).ok_or_else(fail)?;
    let run: String = text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let value: u32 = run.parse().map_err(|_| fail())?;
    if (1..=scale_max).contains(&value) {
        Ok(value)
    } else {
        Err(fail())
    }
}

/// `parse_scale_score` on the RCE scale.
pub fn parse_rce_score(text: &str, rce_scale_max: u32) -> Result<u32, ScoringError> {
    parse_scale_score(text, rce_scale_max)
}

// ---------------------------------------------------------------------------
// Phase estimation
// ---------------------------------------------------------------------------

/// Deterministic request seed from labeled parts; keeps every sampling slot
/// of every case on its own stream without shared state.
fn slot_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn empty_context(of: &RetrievedContext) -> RetrievedContext {
    RetrievedContext {
        query_id: of.query_id.clone(),
        references: Vec::new(),
        k: 0,
        total_tokens: 0,
        budget: of.budget,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeOutcome {
    pub mean: f64,
    pub votes: Vec<Vec<u8>>,
    pub analyses: Vec<AnalysisRecord>,
    pub parse_failures: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RceOutcome {
    pub mean: f64,
    pub scores: Vec<Vec<u32>>,
    pub analyses: Vec<AnalysisRecord>,
    pub parse_failures: u32,
}

struct PhasePlan<'a> {
    phase: Phase,
    analysis_template: &'a PromptTemplate,
    score_template: &'a PromptTemplate,
    n_analyses: usize,
    n_scores: usize,
}

struct PhaseRun {
    completions: Vec<Vec<String>>,
    analyses: Vec<AnalysisRecord>,
}

/// Samples one phase: `n_analyses` analyses (skipped in no-analysis mode,
/// leaving a single direct pass), then `n_scores` completions conditioned on
/// each. Returns the raw score completions; the caller parses them.
fn run_phase(
    plan: &PhasePlan<'_>,
    case: &QueryCase,
    context: &RetrievedContext,
    cfg: &SamplingConfig,
    gateway: &Gateway,
    mode: Mode,
) -> Result<PhaseRun, ScoringError> {
    let context = if mode == Mode::NoContext {
        &empty_context(context)
    } else {
        context
    };
    let phase_tag = plan.phase.to_string();
    let mode_tag = mode.to_string();

    let analyses: Vec<AnalysisRecord> = if mode == Mode::NoAnalysis {
        Vec::new()
    } else {
        let prompt = render_prompt(plan.analysis_template, context, case, None)?;
        let request = CompletionRequest {
            messages: vec![Message::user(prompt)],
            temperature: cfg.temperature,
            max_tokens: cfg.analysis_max_tokens,
            n_samples: plan.n_analyses,
            seed: slot_seed(&[case.case_id(), &mode_tag, &phase_tag, "analysis"]),
        };
        gateway
            .complete(&request)?
            .completions
            .into_iter()
            .enumerate()
            .map(|(index, text)| AnalysisRecord {
                phase: plan.phase,
                text,
                index,
            })
            .collect()
    };

    // In no-analysis mode the scoring prompt renders with an empty analysis
    // slot and the phase issues exactly one row of n_scores completions.
    let rows: Vec<AnalysisRecord> = if mode == Mode::NoAnalysis {
        vec![AnalysisRecord {
            phase: plan.phase,
            text: String::new(),
            index: 0,
        }]
    } else {
        analyses.clone()
    };

    let mut completions = Vec::with_capacity(rows.len());
    for row in &rows {
        let prompt = render_prompt(plan.score_template, context, case, Some(row))?;
        let row_tag = row.index.to_string();
        let request = CompletionRequest {
            messages: vec![Message::user(prompt)],
            temperature: cfg.temperature,
            max_tokens: cfg.score_max_tokens,
            n_samples: plan.n_scores,
            seed: slot_seed(&[case.case_id(), &mode_tag, &phase_tag, "scores", &row_tag]),
        };
        completions.push(gateway.complete(&request)?.completions);
    }
    Ok(PhaseRun { completions, analyses })
}

/// Parses one completion, resampling the slot once before giving up and
/// applying the floor value.
#[allow(clippy::too_many_arguments)]
fn parse_with_resample<T>(
    completion: &str,
    parse: impl Fn(&str) -> Result<T, ScoringError>,
    floor: T,
    resample_request: &CompletionRequest,
    gateway: &Gateway,
    parse_failures: &mut u32,
) -> Result<T, ScoringError> {
    if let Ok(value) = parse(completion) {
        return Ok(value);
    }
    let retry = gateway.complete(resample_request)?;
    match parse(&retry.completions[0]) {
        Ok(value) => Ok(value),
        Err(_) => {
            *parse_failures += 1;
            Ok(floor)
        }
    }
}

fn resample_request(
    original_prompt_seed_parts: &[&str],
    prompt: String,
    cfg: &SamplingConfig,
) -> CompletionRequest {
    let mut parts: Vec<&str> = original_prompt_seed_parts.to_vec();
    parts.push("resample");
    CompletionRequest {
        messages: vec![Message::user(prompt)],
        temperature: cfg.temperature,
        max_tokens: cfg.score_max_tokens,
        n_samples: 1,
        seed: slot_seed(&parts),
    }
}

/// Phase one: mean of k1×k2 binary evidence votes (1×k2 in no-analysis
/// mode). Failed parses floor to 0 after one resample.
pub fn estimate_coe(
    case: &QueryCase,
    context: &RetrievedContext,
    cfg: &SamplingConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    mode: Mode,
) -> Result<CoeOutcome, ScoringError> {
    cfg.validate()?;
    let plan = PhasePlan {
        phase: Phase::Coe,
        analysis_template: &templates.coe_analysis,
        score_template: &templates.coe_score,
        n_analyses: cfg.k1,
        n_scores: cfg.k2,
    };
    let run = run_phase(&plan, case, context, cfg, gateway, mode)?;
    let render_context = if mode == Mode::NoContext {
        empty_context(context)
    } else {
        context.clone()
    };

    let mut parse_failures = 0u32;
    let mut votes = Vec::with_capacity(run.completions.len());
    let mode_tag = mode.to_string();
    for (i, row) in run.completions.iter().enumerate() {
        let analysis = if mode == Mode::NoAnalysis {
            AnalysisRecord { phase: Phase::Coe, text: String::new(), index: 0 }
        } else {
            run.analyses[i].clone()
        };
        let prompt = render_prompt(&templates.coe_score, &render_context, case, Some(&analysis))?;
        let row_tag = i.to_string();
        let mut parsed_row = Vec::with_capacity(row.len());
        for (j, completion) in row.iter().enumerate() {
            let slot_tag = j.to_string();
            let retry = resample_request(
                &[case.case_id(), &mode_tag, "COE", "scores", &row_tag, &slot_tag],
                prompt.clone(),
                cfg,
            );
            parsed_row.push(parse_with_resample(
                completion,
                parse_coe_choice,
                0u8,
                &retry,
                gateway,
                &mut parse_failures,
            )?);
        }
        votes.push(parsed_row);
    }

    let total: u64 = votes.iter().flatten().map(|v| u64::from(*v)).sum();
    let count = votes.iter().map(Vec::len).sum::<usize>();
    Ok(CoeOutcome {
        mean: total as f64 / count as f64,
        votes,
        analyses: run.analyses,
        parse_failures,
    })
}

/// Phase two: mean of k1p×k2p integer ratings in [1, S] (1×k2p in
/// no-analysis mode). Failed parses floor to the scale minimum 1 after one
/// resample.
pub fn estimate_rce(
    case: &QueryCase,
    context: &RetrievedContext,
    cfg: &SamplingConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    mode: Mode,
) -> Result<RceOutcome, ScoringError> {
    cfg.validate()?;
    let plan = PhasePlan {
        phase: Phase::Rce,
        analysis_template: &templates.rce_analysis,
        score_template: &templates.rce_score,
        n_analyses: cfg.k1p,
        n_scores: cfg.k2p,
    };
    let run = run_phase(&plan, case, context, cfg, gateway, mode)?;
    let render_context = if mode == Mode::NoContext {
        empty_context(context)
    } else {
        context.clone()
    };

    let mut parse_failures = 0u32;
    let mut scores = Vec::with_capacity(run.completions.len());
    let mode_tag = mode.to_string();
    for (i, row) in run.completions.iter().enumerate() {
        let analysis = if mode == Mode::NoAnalysis {
            AnalysisRecord { phase: Phase::Rce, text: String::new(), index: 0 }
        } else {
            run.analyses[i].clone()
        };
        let prompt = render_prompt(&templates.rce_score, &render_context, case, Some(&analysis))?;
        let row_tag = i.to_string();
        let mut parsed_row = Vec::with_capacity(row.len());
        for (j, completion) in row.iter().enumerate() {
            let slot_tag = j.to_string();
            let retry = resample_request(
                &[case.case_id(), &mode_tag, "RCE", "scores", &row_tag, &slot_tag],
                prompt.clone(),
                cfg,
            );
            parsed_row.push(parse_with_resample(
                completion,
                |text| parse_rce_score(text, cfg.rce_scale_max),
                1u32,
                &retry,
                gateway,
                &mut parse_failures,
            )?);
        }
        scores.push(parsed_row);
    }

    let total: u64 = scores.iter().flatten().map(|s| u64::from(*s)).sum();
    let count = scores.iter().map(Vec::len).sum::<usize>();
    Ok(RceOutcome {
        mean: total as f64 / count as f64,
        scores,
        analyses: run.analyses,
        parse_failures,
    })
}

/// Runs both phases and assembles the record. COE first, then RCE, with
/// independent prompts.
pub fn score_case(
    case: &QueryCase,
    context: &RetrievedContext,
    cfg: &SamplingConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    mode: Mode,
) -> Result<ScoreRecord, ScoringError> {
    let coe = estimate_coe(case, context, cfg, gateway, templates, mode)?;
    let rce = estimate_rce(case, context, cfg, gateway, templates, mode)?;
    let mut analyses = coe.analyses;
    analyses.extend(rce.analyses);
    Ok(ScoreRecord {
        case_id: case.case_id().to_string(),
        mode,
        coe_votes: coe.votes,
        rce_scores: rce.scores,
        coe_mean: coe.mean,
        rce_mean: rce.mean,
        analyses,
        parse_failures: coe.parse_failures + rce.parse_failures,
    })
}

// ---------------------------------------------------------------------------
// Score cache
// ---------------------------------------------------------------------------

/// Identity of a scoring configuration: sampling parameters, template
/// bodies, and backend. Anything that could change a score changes the hash.
pub fn scoring_config_hash(cfg: &SamplingConfig, templates: &TemplateSet, backend_id: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(cfg).expect("config serializes"));
    for body in templates.bodies_digest() {
        hasher.update([0x1f]);
        hasher.update(body.as_bytes());
    }
    hasher.update([0x1f]);
    hasher.update(backend_id.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

/// One persisted score: the exchange format of the score stage and the
/// resume cache. Analyses are transcripts, not inputs to calibration, and
/// are deliberately not persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredScore {
    pub case_id: String,
    pub mode: Mode,
    pub cfg_hash: String,
    pub coe_votes: Vec<Vec<u8>>,
    pub rce_scores: Vec<Vec<u32>>,
    pub coe_mean: f64,
    pub rce_mean: f64,
}

impl StoredScore {
    fn from_record(record: &ScoreRecord, cfg_hash: &str) -> Self {
        Self {
            case_id: record.case_id.clone(),
            mode: record.mode,
            cfg_hash: cfg_hash.to_string(),
            coe_votes: record.coe_votes.clone(),
            rce_scores: record.rce_scores.clone(),
            coe_mean: record.coe_mean,
            rce_mean: record.rce_mean,
        }
    }

    fn into_record(self) -> ScoreRecord {
        ScoreRecord {
            case_id: self.case_id,
            mode: self.mode,
            coe_votes: self.coe_votes,
            rce_scores: self.rce_scores,
            coe_mean: self.coe_mean,
            rce_mean: self.rce_mean,
            analyses: Vec::new(),
            parse_failures: 0,
        }
    }
}

type ScoreKey = (String, Mode, String);

/// JSON-Lines score store keyed by (case_id, mode, cfg_hash). Appends as
/// records arrive so interrupted runs resume where they stopped.
pub struct ScoreCache {
    inner: std::sync::Mutex<ScoreCacheInner>,
}

struct ScoreCacheInner {
    entries: HashMap<ScoreKey, StoredScore>,
    writer: Option<(PathBuf, BufWriter<File>)>,
}

impl ScoreCache {
    /// In-memory cache; nothing persists.
    pub fn ephemeral() -> Self {
        Self {
            inner: std::sync::Mutex::new(ScoreCacheInner {
                entries: HashMap::new(),
                writer: None,
            }),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ScoringError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        match File::open(path) {
            Ok(file) => {
                for (idx, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| ScoringError::CacheIo {
                        path: path.to_path_buf(),
                        source,
                    })?;
                    let stored: StoredScore = serde_json::from_str(&line)
                        .map_err(|source| ScoringError::CacheParse { line: idx + 1, source })?;
                    entries.insert(
                        (stored.case_id.clone(), stored.mode, stored.cfg_hash.clone()),
                        stored,
                    );
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => {
                return Err(ScoringError::CacheIo {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| ScoringError::CacheIo {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            inner: std::sync::Mutex::new(ScoreCacheInner {
                entries,
                writer: Some((path.to_path_buf(), BufWriter::new(file))),
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, case_id: &str, mode: Mode, cfg_hash: &str) -> Option<ScoreRecord> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .get(&(case_id.to_string(), mode, cfg_hash.to_string()))
            .cloned()
            .map(StoredScore::into_record)
    }

    pub fn put(&self, record: &ScoreRecord, cfg_hash: &str) -> Result<(), ScoringError> {
        let stored = StoredScore::from_record(record, cfg_hash);
        let key = (stored.case_id.clone(), stored.mode, stored.cfg_hash.clone());
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(&key) {
            return Ok(());
        }
        inner.entries.insert(key, stored.clone());
        if let Some((path, writer)) = inner.writer.as_mut() {
            let to_io = |source| ScoringError::CacheIo { path: path.clone(), source };
            let line = serde_json::to_string(&stored).expect("score serializes");
            writeln!(writer, "{line}").map_err(to_io)?;
            writer.flush().map_err(to_io)?;
        }
        Ok(())
    }
}

/// Reads a full score file (the score stage's output) in line order.
pub fn read_score_file(path: impl AsRef<Path>) -> Result<Vec<StoredScore>, ScoringError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ScoringError::CacheIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut scores = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ScoringError::CacheIo {
            path: path.to_path_buf(),
            source,
        })?;
        scores.push(
            serde_json::from_str(&line)
                .map_err(|source| ScoringError::CacheParse { line: idx + 1, source })?,
        );
    }
    Ok(scores)
}

/// Scores a batch of cases, serving cache hits without touching the backend
/// and scoring misses in parallel (the gateway's in-flight bound still
/// limits concurrent backend calls). Results come back in input order.
pub fn score_cases(
    cases: &[(QueryCase, RetrievedContext)],
    cfg: &SamplingConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    mode: Mode,
    cache: &ScoreCache,
) -> Result<Vec<ScoreRecord>, ScoringError> {
    cfg.validate()?;
    let cfg_hash = scoring_config_hash(cfg, templates, gateway.backend_id());
    cases
        .par_iter()
        .map(|(case, context)| {
            if let Some(hit) = cache.get(case.case_id(), mode, &cfg_hash) {
                return Ok(hit);
            }
            let record = score_case(case, context, cfg, gateway, templates, mode)?;
            cache.put(&record, &cfg_hash)?;
            Ok(record)
        })
        .collect()
}
