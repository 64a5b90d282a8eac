//! Configuration loading: a sectioned TOML file with defaults for every knob
//! except the backend endpoint. Unknown keys warn instead of erroring so a
//! config written for a newer build still loads; missing required keys error
//! by name. Credentials are named indirectly via an environment variable and
//! read at use time, never stored in the file or on disk.

use std::collections::BTreeMap;
use std::env;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rootgauge_core::scoring::SamplingConfig;
use rootgauge_core::simbench::BenchConfig;
use serde::{Deserialize, Serialize};

/// Chat-completion backend connection and limits.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    /// Either an HTTP(S) chat-completions URL or `sim://<script.json>` for
    /// the offline simulated backend (path relative to the config file).
    pub endpoint: String,
    pub model_name: String,
    /// Name of the environment variable holding the API credential, if the
    /// endpoint needs one.
    pub credential_env_var: Option<String>,
    pub max_in_flight: usize,
    pub retry_max_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub retry_max_delay_ms: u64,
}

/// Embedding provider: `"mock"` for the deterministic hash embedder, or an
/// HTTP(S) embeddings URL.
#[derive(Debug, Clone)]
pub struct EmbedderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    /// Model bins fitted by threshold optimization.
    pub m: usize,
    /// Equal-width evaluation bins for ECE and reliability reporting.
    pub m_eval: usize,
    pub w_grid_step: f64,
    pub band_level: f64,
}

/// All paths resolved against the config file's directory.
#[derive(Debug, Clone)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub cache_dir: PathBuf,
    pub templates_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeedsConfig {
    /// Master seed for the simulated backend and benchmark.
    pub master: u64,
    /// Seed for the corpus split shuffle.
    pub split: u64,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    /// Token budget L for retrieved references per query.
    pub budget_l: usize,
    pub sampling: SamplingConfig,
    pub calibration: CalibrationConfig,
    pub paths: PathsConfig,
    pub seeds: SeedsConfig,
    pub simbench: BenchConfig,
    /// Directory of the config file; anchors relative paths.
    pub base_dir: PathBuf,
    /// Hex digest of the raw config file, recorded in run manifests.
    pub config_hash: String,
}

// Raw deserialization layer: every field optional so partial sections load,
// with unknown keys collected for warnings rather than rejected.

#[derive(Debug, Default, Deserialize)]
struct RawFile {
    backend: Option<RawBackend>,
    embedder: Option<RawEmbedder>,
    budgets: Option<RawBudgets>,
    sampling: Option<RawSampling>,
    calibration: Option<RawCalibration>,
    paths: Option<RawPaths>,
    seeds: Option<RawSeeds>,
    simbench: Option<toml::Value>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawBackend {
    endpoint: Option<String>,
    model_name: Option<String>,
    credential_env_var: Option<String>,
    max_in_flight: Option<usize>,
    retry_max_attempts: Option<u32>,
    retry_base_delay_ms: Option<u64>,
    retry_max_delay_ms: Option<u64>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawEmbedder {
    endpoint: Option<String>,
    model_name: Option<String>,
    dim: Option<usize>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawBudgets {
    #[serde(rename = "L")]
    l: Option<usize>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawSampling {
    k1: Option<usize>,
    k2: Option<usize>,
    k1p: Option<usize>,
    k2p: Option<usize>,
    temperature: Option<f64>,
    analysis_max_tokens: Option<usize>,
    score_max_tokens: Option<usize>,
    rce_scale_max: Option<u32>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawCalibration {
    m: Option<usize>,
    #[serde(rename = "M")]
    m_eval: Option<usize>,
    w_grid_step: Option<f64>,
    band_level: Option<f64>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawPaths {
    corpus: Option<String>,
    cache_dir: Option<String>,
    templates_dir: Option<String>,
    output_dir: Option<String>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
struct RawSeeds {
    master: Option<u64>,
    split: Option<u64>,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

const SIMBENCH_KEYS: [&str; 6] = ["alpha", "q0", "val_n", "test_n", "seeds", "modes"];

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn warn_unknown(warnings: &mut Vec<String>, section: &str, unknown: &BTreeMap<String, toml::Value>) {
    for key in unknown.keys() {
        let path = if section.is_empty() {
            key.clone()
        } else {
            format!("{section}.{key}")
        };
        warnings.push(format!("unknown config key `{path}` ignored"));
    }
}

/// Loads and validates a config file. Returns the resolved config plus
/// human-readable warnings (unknown keys) for the caller to surface.
pub fn load_config(path: &Path) -> Result<(Config, Vec<String>)> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("config file {} is not UTF-8", path.display()))?;
    let raw: RawFile = toml::from_str(text)
        .with_context(|| format!("parsing config file {}", path.display()))?;

    let mut warnings = Vec::new();
    warn_unknown(&mut warnings, "", &raw.unknown);

    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();

    let rb = raw.backend.unwrap_or_default();
    warn_unknown(&mut warnings, "backend", &rb.unknown);
    let Some(endpoint) = rb.endpoint else {
        bail!(
            "config file {}: missing required key `backend.endpoint`",
            path.display()
        );
    };
    let backend = BackendConfig {
        endpoint,
        model_name: rb.model_name.unwrap_or_else(|| "default".into()),
        credential_env_var: rb.credential_env_var,
        max_in_flight: rb.max_in_flight.unwrap_or(4),
        retry_max_attempts: rb.retry_max_attempts.unwrap_or(5),
        retry_base_delay_ms: rb.retry_base_delay_ms.unwrap_or(1000),
        retry_max_delay_ms: rb.retry_max_delay_ms.unwrap_or(30_000),
    };
    if backend.max_in_flight == 0 {
        bail!("config key `backend.max_in_flight` must be ≥ 1");
    }
    if backend.retry_max_attempts == 0 {
        bail!("config key `backend.retry_max_attempts` must be ≥ 1");
    }

    let re = raw.embedder.unwrap_or_default();
    warn_unknown(&mut warnings, "embedder", &re.unknown);
    let embedder = EmbedderConfig {
        endpoint: re.endpoint.unwrap_or_else(|| "mock".into()),
        model_name: re.model_name.unwrap_or_else(|| "default".into()),
        dim: re.dim.unwrap_or(64),
    };
    if embedder.dim == 0 {
        bail!("config key `embedder.dim` must be ≥ 1");
    }

    let rbud = raw.budgets.unwrap_or_default();
    warn_unknown(&mut warnings, "budgets", &rbud.unknown);
    let budget_l = rbud.l.unwrap_or(3896);

    let rs = raw.sampling.unwrap_or_default();
    warn_unknown(&mut warnings, "sampling", &rs.unknown);
    let defaults = SamplingConfig::default();
    let sampling = SamplingConfig {
        k1: rs.k1.unwrap_or(defaults.k1),
        k2: rs.k2.unwrap_or(defaults.k2),
        k1p: rs.k1p.unwrap_or(defaults.k1p),
        k2p: rs.k2p.unwrap_or(defaults.k2p),
        temperature: rs.temperature.unwrap_or(defaults.temperature),
        analysis_max_tokens: rs.analysis_max_tokens.unwrap_or(defaults.analysis_max_tokens),
        score_max_tokens: rs.score_max_tokens.unwrap_or(defaults.score_max_tokens),
        rce_scale_max: rs.rce_scale_max.unwrap_or(defaults.rce_scale_max),
    };
    sampling
        .validate()
        .map_err(|e| anyhow::anyhow!("config section [sampling]: {e}"))?;

    let rc = raw.calibration.unwrap_or_default();
    warn_unknown(&mut warnings, "calibration", &rc.unknown);
    let calibration = CalibrationConfig {
        m: rc.m.unwrap_or(5),
        m_eval: rc.m_eval.unwrap_or(5),
        w_grid_step: rc.w_grid_step.unwrap_or(0.01),
        band_level: rc.band_level.unwrap_or(0.95),
    };
    if calibration.m < 1 || calibration.m_eval < 1 {
        bail!("config keys `calibration.m` and `calibration.M` must be ≥ 1");
    }
    if !(calibration.w_grid_step > 0.0 && calibration.w_grid_step <= 1.0) {
        bail!("config key `calibration.w_grid_step` must lie in (0, 1]");
    }
    if !(calibration.band_level > 0.0 && calibration.band_level < 1.0) {
        bail!("config key `calibration.band_level` must lie in (0, 1)");
    }

    let rp = raw.paths.unwrap_or_default();
    warn_unknown(&mut warnings, "paths", &rp.unknown);
    let paths = PathsConfig {
        corpus: resolve(&base_dir, rp.corpus.as_deref().unwrap_or("corpus.jsonl")),
        cache_dir: resolve(&base_dir, rp.cache_dir.as_deref().unwrap_or("cache")),
        templates_dir: rp.templates_dir.as_deref().map(|p| resolve(&base_dir, p)),
        output_dir: resolve(&base_dir, rp.output_dir.as_deref().unwrap_or("out")),
    };

    let rseeds = raw.seeds.unwrap_or_default();
    warn_unknown(&mut warnings, "seeds", &rseeds.unknown);
    let master = rseeds.master.unwrap_or(42);
    let seeds = SeedsConfig {
        master,
        split: rseeds.split.unwrap_or(master),
    };

    let simbench = match raw.simbench {
        Some(value) => {
            if let Some(table) = value.as_table() {
                for key in table.keys() {
                    if !SIMBENCH_KEYS.contains(&key.as_str()) {
                        warnings.push(format!("unknown config key `simbench.{key}` ignored"));
                    }
                }
            }
            value
                .try_into()
                .map_err(|e| anyhow::anyhow!("config section [simbench]: {e}"))?
        }
        None => BenchConfig::default(),
    };

    let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut hasher, &bytes);
    let config_hash = hex::encode(&sha2::Digest::finalize(hasher)[..16]);

    Ok((
        Config {
            backend,
            embedder,
            budget_l,
            sampling,
            calibration,
            paths,
            seeds,
            simbench,
            base_dir,
            config_hash,
        },
        warnings,
    ))
}

impl Config {
    /// Reads the backend credential from the configured environment variable.
    /// `Ok(None)` when no variable is configured; an error when one is
    /// configured but unset — callers check this before issuing any request.
    pub fn backend_credential(&self) -> Result<Option<String>> {
        match &self.backend.credential_env_var {
            None => Ok(None),
            Some(var) => match env::var(var) {
                Ok(value) if !value.is_empty() => Ok(Some(value)),
                _ => bail!(
                    "credential environment variable `{var}` (named by `backend.credential_env_var`) is not set"
                ),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("rootgauge.toml");
        let mut file = std::fs::File::create(&path).unwrap();
        file.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[backend]\nendpoint = \"sim://script.json\"\n");
        let (cfg, warnings) = load_config(&path).unwrap();
        assert!(warnings.is_empty(), "unexpected warnings: {warnings:?}");
        assert_eq!(cfg.budget_l, 3896);
        assert_eq!(cfg.sampling.temperature, 1.0);
        assert_eq!(cfg.sampling.analysis_max_tokens, 256);
        assert_eq!(cfg.sampling.rce_scale_max, 5);
        assert_eq!(cfg.calibration.m, 5);
        assert_eq!(cfg.calibration.m_eval, 5);
        assert_eq!(cfg.embedder.endpoint, "mock");
        assert_eq!(cfg.paths.output_dir, dir.path().join("out"));
    }

    #[test]
    fn missing_endpoint_errors_by_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[backend]\nmodel_name = \"x\"\n");
        let err = load_config(&path).unwrap_err();
        assert!(
            err.to_string().contains("backend.endpoint"),
            "error should name the missing key: {err}"
        );
    }

    #[test]
    fn unknown_keys_warn_with_section_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[backend]\nendpoint = \"sim://s.json\"\nfrobnicate = 3\n\n[budgets]\nL = 100\nmax_ctx = 9\n",
        );
        let (cfg, warnings) = load_config(&path).unwrap();
        assert_eq!(cfg.budget_l, 100);
        assert!(warnings.iter().any(|w| w.contains("backend.frobnicate")));
        assert!(warnings.iter().any(|w| w.contains("budgets.max_ctx")));
    }

    #[test]
    fn credential_env_var_is_read_at_use_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[backend]\nendpoint = \"https://api.example.com/v1\"\ncredential_env_var = \"ROOTGAUGE_TEST_CRED\"\n",
        );
        let (cfg, _) = load_config(&path).unwrap();
        // Unset → fail-fast error naming the variable.
        std::env::remove_var("ROOTGAUGE_TEST_CRED");
        let err = cfg.backend_credential().unwrap_err();
        assert!(err.to_string().contains("ROOTGAUGE_TEST_CRED"));
        // Set → read through, not persisted anywhere.
        std::env::set_var("ROOTGAUGE_TEST_CRED", "s3cret");
        assert_eq!(cfg.backend_credential().unwrap().as_deref(), Some("s3cret"));
        std::env::remove_var("ROOTGAUGE_TEST_CRED");
    }

    #[test]
    fn simbench_section_overrides_and_warns_on_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[backend]\nendpoint = \"sim://s.json\"\n\n[simbench]\nval_n = 50\nbogus = 1\n",
        );
        let (cfg, warnings) = load_config(&path).unwrap();
        assert_eq!(cfg.simbench.val_n, 50);
        assert_eq!(cfg.simbench.test_n, 3000);
        assert!(warnings.iter().any(|w| w.contains("simbench.bogus")));
    }
}
