//! Confidence calibration: blend the two phase scores into π, fit bin
//! thresholds on validation data, assign histogram-binned confidences ψ, and
//! evaluate with ECE and reliability tables.
//!
//! The transform is a convex blend π = w·coe + (1−w)·(rce−1)/(S−1). Fitting
//! scans w over a grid and, for each w, places the m−1 interior thresholds
//! exactly by dynamic programming over the midpoints between consecutive
//! distinct π values, minimizing the bin-count-weighted calibration gap
//! Σ (|B|/n)·|mean_π(B) − acc(B)| — the same quantity ECE measures on the
//! evaluation side. Ties resolve toward smaller objective, then smaller w,
//! then the lexicographically smallest threshold vector.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for treating two objective values as tied. The objective is a
/// sum of at most a few thousand absolute terms of magnitude ≤ 1, so real
/// ties land far inside this band while distinct placements sit far outside.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("empty input: at least one case is required")]
    EmptyInput,
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("cannot place {needed} interior thresholds between {distinct} distinct score values; use a smaller m")]
    TooManyBins { needed: usize, distinct: usize },
    #[error("invalid calibration model: {reason}")]
    InvalidModel { reason: String },
    #[error("model file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn check_range(what: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<(), CalibError> {
    if !(value >= lo && value <= hi) {
        return Err(CalibError::OutOfRange { what, value, range });
    }
    Ok(())
}

/// π = w·coe + (1 − w)·(rce − 1)/(S − 1), clamped against float overshoot.
/// Monotone nondecreasing in both scores.
pub fn transform_score(coe_mean: f64, rce_mean: f64, w: f64, s: u32) -> Result<f64, CalibError> {
    check_range("coe_mean", coe_mean, 0.0, 1.0, "[0, 1]")?;
    check_range("rce_mean", rce_mean, 1.0, f64::from(s), "[1, S]")?;
    check_range("w", w, 0.0, 1.0, "[0, 1]")?;
    if s < 2 {
        return Err(CalibError::OutOfRange {
            what: "S",
            value: f64::from(s),
            range: "[2, ∞)",
        });
    }
    let rce_unit = (rce_mean - 1.0) / (f64::from(s) - 1.0);
    Ok((w * coe_mean + (1.0 - w) * rce_unit).clamp(0.0, 1.0))
}

/// The weighting applied to per-bin gaps in the fitting objective. Bin-count
/// weighting makes the objective coincide with ECE; the enum is the hook for
/// alternative weightings (e.g. emphasizing high-confidence bins).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BinWeighting {
    #[default]
    BinCount,
}

/// A fitted calibration model: the blend weight, the bin edges
/// `0 = t_0 < t_1 < … < t_m = 1`, and each bin's validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub w: f64,
    pub thresholds: Vec<f64>,
    pub bin_confidences: Vec<f64>,
    pub m: usize,
    #[serde(rename = "S")]
    pub s: u32,
    /// Fitting objective achieved on the validation set; a diagnostic, not
    /// part of the persisted model.
    #[serde(skip)]
    pub objective: f64,
    #[serde(skip)]
    pub omega: BinWeighting,
}

impl CalibrationModel {
    pub fn validate(&self) -> Result<(), CalibError> {
        let fail = |reason: String| Err(CalibError::InvalidModel { reason });
        if self.m < 1 {
            return fail("m must be ≥ 1".into());
        }
        if self.thresholds.len() != self.m + 1 {
            return fail(format!(
                "expected {} thresholds for m = {}, found {}",
                self.m + 1,
                self.m,
                self.thresholds.len()
            ));
        }
        if self.thresholds[0] != 0.0 || self.thresholds[self.m] != 1.0 {
            return fail("thresholds must start at 0 and end at 1".into());
        }
        if self.thresholds.windows(2).any(|p| p[0] >= p[1]) {
            return fail("thresholds must be strictly increasing".into());
        }
        if self.bin_confidences.len() != self.m {
            return fail(format!(
                "expected {} bin confidences, found {}",
                self.m,
                self.bin_confidences.len()
            ));
        }
        if self.bin_confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("bin confidences must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.w) {
            return fail("w must lie in [0, 1]".into());
        }
        if self.s < 2 {
            return fail("S must be ≥ 2".into());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| CalibError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(file), self).map_err(|source| {
            CalibError::Parse {
                path: path.to_path_buf(),
                source,
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CalibError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: Self =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| CalibError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        model.validate()?;
        Ok(model)
    }
}

/// A case's final confidence: the raw π, the model bin it fell into, and the
/// assigned ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedConfidence {
    pub case_id: String,
    pub pi_value: f64,
    pub bin_index: usize,
    pub psi: f64,
}

/// Locates `value` among bin edges: half-open `[t_i, t_{i+1})` with the last
/// bin closed at the top, so a value equal to an interior threshold lands in
/// the upper bin.
fn locate_bin(value: f64, thresholds: &[f64]) -> usize {
    let m = thresholds.len() - 1;
    for i in 0..m - 1 {
        if value < thresholds[i + 1] {
            return i;
        }
    }
    m - 1
}

/// Histogram-binned assignment: π from the model transform, ψ = the fitted
/// accuracy of π's bin.
pub fn assign_confidence(
    model: &CalibrationModel,
    case_id: &str,
    coe_mean: f64,
    rce_mean: f64,
) -> Result<AssignedConfidence, CalibError> {
    let pi_value = transform_score(coe_mean, rce_mean, model.w, model.s)?;
    let bin_index = locate_bin(pi_value, &model.thresholds);
    Ok(AssignedConfidence {
        case_id: case_id.to_string(),
        pi_value,
        bin_index,
        psi: model.bin_confidences[bin_index],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniformMode {
    Combined,
    RceOnly,
}

/// Uncalibrated baseline: project the scores linearly onto [0,1] and use the
/// projection itself as ψ. The bin index refers to the M equal-width
/// evaluation bins, purely for reporting.
pub fn uniform_baseline(
    case_id: &str,
    coe_mean: f64,
    rce_mean: f64,
    w: f64,
    s: u32,
    mode: UniformMode,
    eval_bins: usize,
) -> Result<AssignedConfidence, CalibError> {
    let psi = match mode {
        UniformMode::Combined => transform_score(coe_mean, rce_mean, w, s)?,
        UniformMode::RceOnly => transform_score(0.0, rce_mean, 0.0, s)?,
    };
    Ok(AssignedConfidence {
        case_id: case_id.to_string(),
        pi_value: psi,
        bin_index: equal_width_bin(psi, eval_bins),
        psi,
    })
}

/// Index of `value` among `bins` equal-width bins `[j/bins, (j+1)/bins)`,
/// last bin closed. The multiply-and-floor estimate can land one bin low (or
/// high) when `value` sits exactly on a boundary double — e.g. 0.6·5 rounds
/// to 2.9999999999999996 — so the estimate is reconciled against the bounds
/// as actually computed by division.
pub(crate) fn equal_width_bin(value: f64, bins: usize) -> usize {
    let mut bin = ((value * bins as f64).floor() as usize).min(bins - 1);
    if bin + 1 < bins && value >= (bin + 1) as f64 / bins as f64 {
        bin += 1;
    } else if value < bin as f64 / bins as f64 {
        bin -= 1;
    }
    bin
}

// ---------------------------------------------------------------------------
// Threshold fitting
// ---------------------------------------------------------------------------

struct DistinctStats {
    /// Distinct π values ascending.
    values: Vec<f64>,
    /// Prefix sums over distinct-value groups: Σπ, Σlabel.
    sum_pi: Vec<f64>,
    sum_label: Vec<f64>,
    n: usize,
}

impl DistinctStats {
    fn build(pis: &[f64], labels: &[u8]) -> Self {
        let mut order: Vec<usize> = (0..pis.len()).collect();
        order.sort_by(|&a, &b| pis[a].partial_cmp(&pis[b]).expect("finite scores"));

        let mut values = Vec::new();
        let mut sum_pi = vec![0.0f64];
        let mut sum_label = vec![0.0f64];
        for &idx in &order {
            if values.last() != Some(&pis[idx]) {
                values.push(pis[idx]);
                sum_pi.push(*sum_pi.last().unwrap());
                sum_label.push(*sum_label.last().unwrap());
            }
            let last = values.len();
            sum_pi[last] += pis[idx];
            sum_label[last] += f64::from(labels[idx]);
        }
        Self {
            values,
            sum_pi,
            sum_label,
            n: pis.len(),
        }
    }

    /// Objective contribution of one bin covering distinct values a..=b
    /// (1-indexed): (|B|/n)·|mean_π − acc| = |Σ(π − label)| / n.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let pi = self.sum_pi[b] - self.sum_pi[a - 1];
        let label = self.sum_label[b] - self.sum_label[a - 1];
        (pi - label).abs() / self.n as f64
    }
}

/// Exact interior-threshold placement for fixed scores: chooses m−1
/// midpoints between consecutive distinct values minimizing the bin-count
/// weighted gap, by dynamic programming over suffixes. Returns the interior
/// thresholds (lexicographically smallest among ties) and the objective.
pub fn fit_thresholds(
    pis: &[f64],
    labels: &[u8],
    m: usize,
) -> Result<(Vec<f64>, f64), CalibError> {
    if pis.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    assert_eq!(pis.len(), labels.len(), "scores and labels must align");
    for &pi in pis {
        check_range("pi", pi, 0.0, 1.0, "[0, 1]")?;
    }
    if m < 1 {
        return Err(CalibError::OutOfRange {
            what: "m",
            value: m as f64,
            range: "[1, ∞)",
        });
    }

    let stats = DistinctStats::build(pis, labels);
    let d = stats.values.len();
    if m - 1 > d - 1 {
        return Err(CalibError::TooManyBins {
            needed: m - 1,
            distinct: d,
        });
    }

    // best[g][i] (g groups, 1-indexed start i) = minimal cost of splitting
    // distinct values i..=d into g nonempty consecutive groups.
    let mut best = vec![vec![f64::INFINITY; d + 2]; m + 1];
    for i in 1..=d {
        best[1][i] = stats.cost(i, d);
    }
    for g in 2..=m {
        for i in 1..=(d - g + 1) {
            let mut min_cost = f64::INFINITY;
            for j in i..=(d - g + 1) {
                let cost = stats.cost(i, j) + best[g - 1][j + 1];
                if cost < min_cost {
                    min_cost = cost;
                }
            }
            best[g][i] = min_cost;
        }
    }
    let objective = best[m][1];

    // Greedy forward reconstruction: at each step take the smallest cut that
    // still reaches the optimum (within the tie tolerance), which yields the
    // lexicographically smallest threshold vector.
    let mut interior = Vec::with_capacity(m - 1);
    let mut i = 1usize;
    let mut g = m;
    while g > 1 {
        let target = best[g][i];
        let cut = (i..=(d - g + 1))
            .find(|&j| stats.cost(i, j) + best[g - 1][j + 1] <= target + TIE_EPS)
            .expect("the DP argmin always satisfies its own bound");
        interior.push((stats.values[cut - 1] + stats.values[cut]) / 2.0);
        i = cut + 1;
        g -= 1;
    }
    Ok((interior, objective))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    Full,
    RceOnly,
}

fn w_grid(step: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut i = 0u64;
    loop {
        let w = i as f64 * step;
        // Stop just shy of 1 so float accumulation never emits a duplicate
        // of the exact endpoint pushed below.
        if w >= 1.0 - 1e-12 {
            break;
        }
        grid.push(w);
        i += 1;
    }
    grid.push(1.0);
    grid
}

/// Fits the blend weight and thresholds on validation triples
/// `(coe_mean, rce_mean, label)`. Scans w over `{0, step, …, 1}` (fixed to 0
/// in rce-only mode), places thresholds exactly per w, and picks the global
/// minimizer. Grid points where m−1 thresholds cannot fit between the
/// distinct π values are skipped; if every point is infeasible the error
/// suggests a smaller m. Bin confidences are the per-bin validation
/// accuracies (empty bin: the bin midpoint).
pub fn fit_calibration(
    val: &[(f64, f64, u8)],
    m: usize,
    w_grid_step: f64,
    mode: FitMode,
    s: u32,
) -> Result<CalibrationModel, CalibError> {
    if val.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    if m < 2 {
        return Err(CalibError::OutOfRange {
            what: "m",
            value: m as f64,
            range: "[2, ∞)",
        });
    }
    check_range("w_grid_step", w_grid_step, f64::MIN_POSITIVE, 1.0, "(0, 1]")?;
    for &(_, _, label) in val {
        if label > 1 {
            return Err(CalibError::OutOfRange {
                what: "label",
                value: f64::from(label),
                range: "{0, 1}",
            });
        }
    }

    let grid = match mode {
        FitMode::RceOnly => vec![0.0],
        FitMode::Full => w_grid(w_grid_step),
    };
    let labels: Vec<u8> = val.iter().map(|&(_, _, l)| l).collect();

    let candidates: Vec<Result<(f64, f64, Vec<f64>), CalibError>> = grid
        .par_iter()
        .map(|&w| {
            let pis = val
                .iter()
                .map(|&(coe, rce, _)| transform_score(coe, rce, w, s))
                .collect::<Result<Vec<f64>, CalibError>>()?;
            let (interior, objective) = fit_thresholds(&pis, &labels, m)?;
            Ok((w, objective, interior))
        })
        .collect();

    // Grid points where the scores collapse onto too few distinct values are
    // skipped; other errors abort, and a fully infeasible grid surfaces the
    // last infeasibility.
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut infeasible: Option<CalibError> = None;
    for candidate in candidates {
        match candidate {
            Ok(entry) => {
                let better = match &best {
                    None => true,
                    // The grid ascends, so on a tie the earlier (smaller) w
                    // stays; fit_thresholds already returned the smallest
                    // threshold vector for that w.
                    Some((_, best_obj, _)) => entry.1 < best_obj - TIE_EPS,
                };
                if better {
                    best = Some(entry);
                }
            }
            Err(err @ CalibError::TooManyBins { .. }) => infeasible = Some(err),
            Err(err) => return Err(err),
        }
    }
    let (w, objective, interior) = match best {
        Some(entry) => entry,
        None => {
            return Err(infeasible.unwrap_or(CalibError::TooManyBins {
                needed: m - 1,
                distinct: 0,
            }))
        }
    };

    let mut thresholds = Vec::with_capacity(m + 1);
    thresholds.push(0.0);
    thresholds.extend(interior);
    thresholds.push(1.0);

    // Histogram binning: each bin's confidence is its validation accuracy.
    let mut counts = vec![0usize; m];
    let mut correct = vec![0usize; m];
    for &(coe, rce, label) in val {
        let pi = transform_score(coe, rce, w, s)?;
        let bin = locate_bin(pi, &thresholds);
        counts[bin] += 1;
        correct[bin] += usize::from(label);
    }
    let bin_confidences: Vec<f64> = (0..m)
        .map(|bin| {
            if counts[bin] == 0 {
                (thresholds[bin] + thresholds[bin + 1]) / 2.0
            } else {
                correct[bin] as f64 / counts[bin] as f64
            }
        })
        .collect();

    let model = CalibrationModel {
        w,
        thresholds,
        bin_confidences,
        m,
        s,
        objective,
        omega: BinWeighting::BinCount,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Evaluation: ECE and reliability
// ---------------------------------------------------------------------------

/// One evaluation bin: bounds, occupancy, mean confidence, accuracy, and the
/// expected-alignment band. Empty bins carry no statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: Option<f64>,
    pub accuracy: Option<f64>,
    pub band_lo: Option<f64>,
    pub band_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub m_bins: usize,
    pub band_level: f64,
    pub rows: Vec<ReliabilityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub ece: f64,
    pub m_bins: usize,
    pub n: usize,
    pub table: ReliabilityTable,
}

/// Inverse standard-normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 — far finer than any plotted band needs).
fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile must be in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Wilson score interval for a proportion `p_hat` observed over `count`
/// trials, at confidence `level`.
pub fn wilson_interval(p_hat: f64, count: usize, level: f64) -> (f64, f64) {
    assert!(count > 0, "Wilson interval needs at least one trial");
    let n = count as f64;
    let z = inverse_normal_cdf(1.0 - (1.0 - level) / 2.0);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Bins `(psi, label)` pairs into M equal-width bins (last bin closed) and
/// reports per-bin confidence, accuracy, and the Wilson expected-alignment
/// band centered on the bin's mean confidence.
pub fn reliability_report(
    assigned: &[(f64, u8)],
    m_bins: usize,
    band_level: f64,
) -> Result<ReliabilityTable, CalibError> {
    if assigned.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    if m_bins < 1 {
        return Err(CalibError::OutOfRange {
            what: "M",
            value: m_bins as f64,
            range: "[1, ∞)",
        });
    }
    if !(band_level > 0.0 && band_level < 1.0) {
        return Err(CalibError::OutOfRange {
            what: "band_level",
            value: band_level,
            range: "(0, 1)",
        });
    }
    for &(psi, label) in assigned {
        check_range("psi", psi, 0.0, 1.0, "[0, 1]")?;
        if label > 1 {
            return Err(CalibError::OutOfRange {
                what: "label",
                value: f64::from(label),
                range: "{0, 1}",
            });
        }
    }

    let mut counts = vec![0usize; m_bins];
    let mut conf_sums = vec![0.0f64; m_bins];
    let mut correct = vec![0usize; m_bins];
    for &(psi, label) in assigned {
        let bin = equal_width_bin(psi, m_bins);
        counts[bin] += 1;
        conf_sums[bin] += psi;
        correct[bin] += usize::from(label);
    }

    let rows = (0..m_bins)
        .map(|bin| {
            let lo = bin as f64 / m_bins as f64;
            let hi = (bin + 1) as f64 / m_bins as f64;
            if counts[bin] == 0 {
                return ReliabilityRow {
                    lo,
                    hi,
                    count: 0,
                    mean_conf: None,
                    accuracy: None,
                    band_lo: None,
                    band_hi: None,
                };
            }
            let mean_conf = conf_sums[bin] / counts[bin] as f64;
            let accuracy = correct[bin] as f64 / counts[bin] as f64;
            let (band_lo, band_hi) = wilson_interval(mean_conf, counts[bin], band_level);
            ReliabilityRow {
                lo,
                hi,
                count: counts[bin],
                mean_conf: Some(mean_conf),
                accuracy: Some(accuracy),
                band_lo: Some(band_lo),
                band_hi: Some(band_hi),
            }
        })
        .collect();

    Ok(ReliabilityTable {
        m_bins,
        band_level,
        rows,
    })
}

/// Expected calibration error over M equal-width bins:
/// Σ (|B|/n)·|acc(B) − conf(B)|, empty bins contributing nothing.
pub fn compute_ece(assigned: &[(f64, u8)], m_bins: usize) -> Result<EceReport, CalibError> {
    let table = reliability_report(assigned, m_bins, 0.95)?;
    let n = assigned.len();
    let ece = table
        .rows
        .iter()
        .filter(|row| row.count > 0)
        .map(|row| {
            let gap = (row.accuracy.unwrap() - row.mean_conf.unwrap()).abs();
            row.count as f64 / n as f64 * gap
        })
        .sum();
    Ok(EceReport {
        ece,
        m_bins,
        n,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_worked_examples() {
        assert_eq!(transform_score(0.6, 3.0, 1.0, 5).unwrap(), 0.6);
        assert_eq!(transform_score(0.0, 5.0, 0.0, 5).unwrap(), 1.0);
        assert_eq!(transform_score(0.75, 4.0, 0.5, 5).unwrap(), 0.75);
    }

    #[test]
    fn transform_rejects_out_of_range() {
        assert!(transform_score(1.2, 3.0, 0.5, 5).is_err());
        assert!(transform_score(0.5, 0.5, 0.5, 5).is_err());
        assert!(transform_score(0.5, 6.0, 0.5, 5).is_err());
        assert!(transform_score(0.5, 3.0, -0.1, 5).is_err());
    }

    #[test]
    fn threshold_fit_matches_worked_example() {
        // Scores [0.1, 0.2, 0.8, 0.9] with labels [0, 0, 1, 1] and m = 2:
        // cutting after 0.1 costs |0.1−0|/4 + |1.9−2|/4 = 0.05, tied with
        // cutting before 0.9; the smaller threshold vector wins.
        let pis = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        let (interior, objective) = fit_thresholds(&pis, &labels, 2).unwrap();
        assert!((objective - 0.05).abs() < 1e-12, "objective {objective}");
        assert_eq!(interior.len(), 1);
        assert!((interior[0] - 0.15).abs() < 1e-12, "threshold {}", interior[0]);
    }

    #[test]
    fn threshold_fit_rejects_oversplit() {
        let err = fit_thresholds(&[0.2, 0.2, 0.7], &[0, 1, 1], 3).unwrap_err();
        assert!(matches!(err, CalibError::TooManyBins { needed: 2, distinct: 2 }));
        assert!(err.to_string().contains("smaller m"));
    }

    /// Exhaustive oracle: every way of choosing m−1 midpoints.
    fn brute_force_objective(pis: &[f64], labels: &[u8], m: usize) -> f64 {
        let stats = DistinctStats::build(pis, labels);
        let d = stats.values.len();
        fn recurse(stats: &DistinctStats, start: usize, groups: usize, d: usize) -> f64 {
            if groups == 1 {
                return stats.cost(start, d);
            }
            let mut best = f64::INFINITY;
            for j in start..=(d - groups + 1) {
                let cost = stats.cost(start, j) + recurse(stats, j + 1, groups - 1, d);
                if cost < best {
                    best = cost;
                }
            }
            best
        }
        recurse(&stats, 1, m, d)
    }

    #[test]
    fn threshold_fit_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let n = rng.random_range(2..=12);
            // Coarse grid values invite duplicate scores and tied splits.
            let pis: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=8)) / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let distinct = {
                let mut v = pis.clone();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup();
                v.len()
            };
            for m in 1..=3usize {
                if m - 1 > distinct - 1 {
                    assert!(fit_thresholds(&pis, &labels, m).is_err());
                    continue;
                }
                let (interior, objective) = fit_thresholds(&pis, &labels, m).unwrap();
                let oracle = brute_force_objective(&pis, &labels, m);
                assert!(
                    (objective - oracle).abs() < 1e-12,
                    "trial {trial} m {m}: dp {objective} vs oracle {oracle}"
                );
                assert_eq!(interior.len(), m - 1);
                assert!(interior.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }

    #[test]
    fn fit_calibration_breaks_exact_ties_toward_smaller_w() {
        // Each case has coe == (rce−1)/4 with dyadic values, so pi is
        // bitwise identical at every w: [0.125, 0.25, 0.75, 0.875]. Cutting
        // after the first value ties with cutting before the last (both
        // cost 0.0625); the smaller threshold wins, and with every grid
        // point tied on objective the smallest w wins.
        let val = [
            (0.125, 1.5, 0u8),
            (0.25, 2.0, 0),
            (0.75, 4.0, 1),
            (0.875, 4.5, 1),
        ];
        let model = fit_calibration(&val, 2, 0.01, FitMode::Full, 5).unwrap();
        assert_eq!(model.w, 0.0);
        assert!((model.objective - 0.0625).abs() < 1e-15);
        assert_eq!(model.thresholds.len(), 3);
        assert!((model.thresholds[1] - 0.1875).abs() < 1e-15);
        // Bin [0, 0.1875): the 0.125 case, label 0. Bin [0.1875, 1]: 2 of 3.
        assert_eq!(model.bin_confidences[0], 0.0);
        assert!((model.bin_confidences[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rce_only_mode_pins_w_to_zero() {
        let val = [
            (0.9, 1.0, 0u8),
            (0.8, 2.0, 0),
            (0.1, 4.0, 1),
            (0.2, 5.0, 1),
        ];
        let model = fit_calibration(&val, 2, 0.01, FitMode::RceOnly, 5).unwrap();
        assert_eq!(model.w, 0.0);
    }

    #[test]
    fn full_mode_never_loses_to_rce_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(4..=24);
            let val: Vec<(f64, f64, u8)> = (0..n)
                .map(|_| {
                    (
                        f64::from(rng.random_range(0..=10)) / 10.0,
                        1.0 + f64::from(rng.random_range(0..=8)) / 2.0,
                        u8::from(rng.random_bool(0.5)),
                    )
                })
                .collect();
            let full = fit_calibration(&val, 2, 0.05, FitMode::Full, 5);
            let rce = fit_calibration(&val, 2, 0.05, FitMode::RceOnly, 5);
            if let (Ok(full), Ok(rce)) = (full, rce) {
                assert!(full.objective <= rce.objective + TIE_EPS);
            }
        }
    }

    #[test]
    fn degenerate_labels_give_unit_confidences() {
        let val = [(0.1, 2.0, 1u8), (0.5, 3.0, 1), (0.9, 4.0, 1)];
        let model = fit_calibration(&val, 2, 0.1, FitMode::Full, 5).unwrap();
        for (bin, &conf) in model.bin_confidences.iter().enumerate() {
            // Bins that hold cases are perfectly accurate; an empty bin
            // falls back to its midpoint.
            let lo = model.thresholds[bin];
            let hi = model.thresholds[bin + 1];
            assert!(conf == 1.0 || (conf - (lo + hi) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_follows_half_open_bins() {
        let model = CalibrationModel {
            w: 1.0,
            thresholds: vec![0.0, 0.15, 1.0],
            bin_confidences: vec![0.0, 2.0 / 3.0],
            m: 2,
            s: 5,
            objective: 0.05,
            omega: BinWeighting::BinCount,
        };
        // pi = 0.85 → upper bin, psi = fitted accuracy 2/3.
        let assigned = assign_confidence(&model, "c1", 0.85, 1.0).unwrap();
        assert_eq!(assigned.bin_index, 1);
        assert!((assigned.psi - 2.0 / 3.0).abs() < 1e-12);
        // A value exactly on an interior threshold joins the upper bin.
        let on_edge = assign_confidence(&model, "c2", 0.15, 1.0).unwrap();
        assert_eq!(on_edge.bin_index, 1);
        // pi = 1.0 lands in the last (closed) bin.
        let top = assign_confidence(&model, "c3", 1.0, 5.0).unwrap();
        assert_eq!(top.bin_index, 1);
    }

    #[test]
    fn uniform_baselines_project_linearly() {
        let rce_only = uniform_baseline("c", 0.9, 3.0, 0.5, 5, UniformMode::RceOnly, 5).unwrap();
        assert_eq!(rce_only.psi, 0.5);
        let combined_hi = uniform_baseline("c", 1.0, 5.0, 0.5, 5, UniformMode::Combined, 5).unwrap();
        assert_eq!(combined_hi.psi, 1.0);
        assert_eq!(combined_hi.bin_index, 4, "psi = 1.0 joins the last bin");
        let combined_lo = uniform_baseline("c", 0.0, 1.0, 0.5, 5, UniformMode::Combined, 5).unwrap();
        assert_eq!(combined_lo.psi, 0.0);
    }

    #[test]
    fn ece_worked_examples() {
        let all_point_nine: Vec<(f64, u8)> = (0..10).map(|i| (0.9, u8::from(i < 9))).collect();
        let report = compute_ece(&all_point_nine, 5).unwrap();
        assert!(report.ece.abs() < 1e-12, "conf 0.9 vs acc 0.9 → 0, got {}", report.ece);

        let mixed = [(0.9, 1u8), (0.9, 0), (0.1, 0), (0.3, 1)];
        let report = compute_ece(&mixed, 5).unwrap();
        assert!((report.ece - 0.4).abs() < 1e-12, "got {}", report.ece);

        let single = [(0.0, 0u8)];
        assert!(compute_ece(&single, 5).unwrap().ece.abs() < 1e-12);
    }

    #[test]
    fn ece_rejects_empty_input() {
        assert!(matches!(compute_ece(&[], 5), Err(CalibError::EmptyInput)));
    }

    #[test]
    fn ece_matches_brute_force_oracle() {
        // Independent implementation: loop over bins, collect members by
        // interval test, average directly.
        fn oracle(points: &[(f64, u8)], m: usize) -> f64 {
            let n = points.len() as f64;
            let mut total = 0.0;
            for bin in 0..m {
                let lo = bin as f64 / m as f64;
                let hi = (bin + 1) as f64 / m as f64;
                let members: Vec<&(f64, u8)> = points
                    .iter()
                    .filter(|(psi, _)| {
                        if bin + 1 == m {
                            *psi >= lo && *psi <= 1.0
                        } else {
                            *psi >= lo && *psi < hi
                        }
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let conf: f64 =
                    members.iter().map(|(p, _)| p).sum::<f64>() / members.len() as f64;
                let acc: f64 = members.iter().map(|(_, l)| f64::from(*l)).sum::<f64>()
                    / members.len() as f64;
                total += members.len() as f64 / n * (acc - conf).abs();
            }
            total
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..=50);
            let m = rng.random_range(2..=10);
            let points: Vec<(f64, u8)> = (0..n)
                .map(|_| (rng.random::<f64>(), u8::from(rng.random_bool(0.5))))
                .collect();
            let report = compute_ece(&points, m).unwrap();
            let expected = oracle(&points, m);
            assert!(
                (report.ece - expected).abs() < 1e-12,
                "n={n} m={m}: {} vs {expected}",
                report.ece
            );
            assert!((0.0..=1.0).contains(&report.ece));
        }
    }

    #[test]
    fn inverse_normal_hits_known_quantiles() {
        assert!(inverse_normal_cdf(0.5).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.975) - 1.959963985).abs() < 1e-7);
        assert!((inverse_normal_cdf(0.025) + 1.959963985).abs() < 1e-7);
        assert!((inverse_normal_cdf(0.8413447460685429) - 1.0).abs() < 1e-7);
        assert!((inverse_normal_cdf(0.99) - 2.3263478740).abs() < 1e-7);
    }

    #[test]
    fn wilson_band_matches_hand_computation() {
        // p̂ = 0.7 over 100 trials at 95%.
        let (lo, hi) = wilson_interval(0.7, 100, 0.95);
        assert!((lo - 0.604).abs() < 1e-3, "lo {lo}");
        assert!((hi - 0.781).abs() < 1e-3, "hi {hi}");
    }

    #[test]
    fn reliability_rows_cover_unit_interval_with_nulls_for_empty_bins() {
        let points = [(0.05, 0u8), (0.95, 1), (0.97, 1)];
        let table = reliability_report(&points, 5, 0.95).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.rows[0].count, 1);
        assert_eq!(table.rows[2].count, 0);
        assert!(table.rows[2].accuracy.is_none());
        assert!(table.rows[2].band_lo.is_none());
        let last = &table.rows[4];
        assert_eq!(last.count, 2);
        assert_eq!(last.accuracy, Some(1.0));
        assert_eq!((last.lo, last.hi), (0.8, 1.0));
        // The band brackets the bin's mean confidence and stays in [0, 1].
        let mean_conf = last.mean_conf.unwrap();
        assert!((mean_conf - 0.96).abs() < 1e-12);
        let (band_lo, band_hi) = (last.band_lo.unwrap(), last.band_hi.unwrap());
        assert!(band_lo < mean_conf && mean_conf < band_hi);
        assert!(band_lo >= 0.0 && band_hi <= 1.0);
    }

    #[test]
    fn equal_width_binning_is_half_open_even_on_boundary_doubles() {
        // 0.6 * 5 rounds below 3.0 in f64; the binner must still place the
        // boundary value in the upper bin.
        for bins in 2..=12usize {
            for j in 0..bins {
                let boundary = j as f64 / bins as f64;
                assert_eq!(equal_width_bin(boundary, bins), j, "{j}/{bins}");
            }
            assert_eq!(equal_width_bin(1.0, bins), bins - 1);
        }
    }

    #[test]
    fn reliability_validates_band_level() {
        let points = [(0.5, 1u8)];
        assert!(reliability_report(&points, 5, 0.0).is_err());
        assert!(reliability_report(&points, 5, 1.0).is_err());
        assert!(reliability_report(&points, 5, 0.95).is_ok());
    }

    #[test]
    fn perfectly_calibrated_stream_converges() {
        // psi is the true Bernoulli parameter for each draw; at n = 10,000
        // the measured ECE must drop to sampling noise.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<(f64, u8)> = (0..10_000)
            .map(|_| {
                let p = rng.random::<f64>();
                (p, u8::from(rng.random_bool(p)))
            })
            .collect();
        let report = compute_ece(&points, 5).unwrap();
        assert!(report.ece <= 0.02, "ece {}", report.ece);
    }

    #[test]
    fn model_file_round_trips_with_documented_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = fit_calibration(
            &[(0.1, 1.0, 0u8), (0.2, 2.0, 0), (0.8, 4.0, 1), (0.9, 5.0, 1)],
            2,
            0.1,
            FitMode::Full,
            5,
        )
        .unwrap();
        model.save(&path).unwrap();

        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let keys: Vec<&str> = raw.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for key in ["w", "thresholds", "bin_confidences", "m", "S"] {
            assert!(keys.contains(&key), "missing key {key}");
        }

        let loaded = CalibrationModel::load(&path).unwrap();
        assert_eq!(loaded.w, model.w);
        assert_eq!(loaded.thresholds, model.thresholds);
        assert_eq!(loaded.bin_confidences, model.bin_confidences);
    }

    #[test]
    fn model_load_rejects_corrupt_models() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(
            &path,
            r#"{"w": 0.5, "thresholds": [0.0, 0.8, 0.4, 1.0], "bin_confidences": [0.1, 0.2, 0.3], "m": 3, "S": 5}"#,
        )
        .unwrap();
        assert!(matches!(
            CalibrationModel::load(&path),
            Err(CalibError::InvalidModel { .. })
        ));
    }

    proptest! {
        #[test]
        fn transform_is_monotone(
            coe in 0.0f64..=1.0,
            rce in 1.0f64..=5.0,
            w in 0.0f64..=1.0,
            d_coe in 0.0f64..=0.5,
            d_rce in 0.0f64..=2.0,
        ) {
            let base = transform_score(coe, rce, w, 5).unwrap();
            let coe_up = transform_score((coe + d_coe).min(1.0), rce, w, 5).unwrap();
            let rce_up = transform_score(coe, (rce + d_rce).min(5.0), w, 5).unwrap();
            prop_assert!(coe_up >= base - 1e-15);
            prop_assert!(rce_up >= base - 1e-15);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn transform_is_stable_under_scale_relabeling(
            coe in 0.0f64..=1.0,
            rce_step in 0u32..=40,
            w in 0.0f64..=1.0,
        ) {
            // Writing the scale as 0..S−1 instead of 1..S, with the matching
            // normalization, is the identical map.
            let s = 5u32;
            let rce = 1.0 + f64::from(rce_step) * 0.1;
            let direct = transform_score(coe, rce, w, s).unwrap();
            let shifted = (rce - 1.0) / f64::from(s - 1);
            let relabeled = (w * coe + (1.0 - w) * shifted).clamp(0.0, 1.0);
            prop_assert!((direct - relabeled).abs() < 1e-15);
        }

        #[test]
        fn every_pi_lands_in_exactly_one_bin(pi in 0.0f64..=1.0) {
            let thresholds = [0.0, 0.25, 0.6, 1.0];
            let bin = locate_bin(pi, &thresholds);
            prop_assert!(bin < 3);
            let lo_ok = pi >= thresholds[bin];
            let hi_ok = if bin == 2 { pi <= 1.0 } else { pi < thresholds[bin + 1] };
            prop_assert!(lo_ok && hi_ok);
        }
    }
}
