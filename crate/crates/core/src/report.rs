//! Rendering of calibration results: reliability tables as CSV and as
//! self-contained SVG bar charts, and score-distribution histograms as CSV.
//!
//! All output is deterministic — identical inputs produce identical bytes —
//! so downstream runs can be compared with a plain byte diff.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::calib::{equal_width_bin, ReliabilityTable};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty input: at least one case is required")]
    EmptyInput,
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Renders a reliability table as CSV. Empty bins leave their statistics
/// columns blank.
pub fn reliability_csv(table: &ReliabilityTable) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,mean_conf,accuracy,band_lo,band_hi\n");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.lo,
            row.hi,
            row.count,
            fmt_opt(row.mean_conf),
            fmt_opt(row.accuracy),
            fmt_opt(row.band_lo),
            fmt_opt(row.band_hi),
        );
    }
    out
}

pub fn write_reliability_csv(
    path: impl AsRef<Path>,
    table: &ReliabilityTable,
) -> Result<(), ReportError> {
    let path = path.as_ref();
    fs::write(path, reliability_csv(table)).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 420.0;
const PLOT_LEFT: f64 = 60.0;
const PLOT_RIGHT: f64 = 620.0;
const PLOT_TOP: f64 = 48.0;
const PLOT_BOTTOM: f64 = 360.0;

fn y_of(value: f64) -> f64 {
    PLOT_BOTTOM - value * (PLOT_BOTTOM - PLOT_TOP)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders a reliability diagram: per bin, a confidence bar and an accuracy
/// bar, with a shaded rectangle spanning the Wilson band. An accuracy bar
/// whose tip leaves the shaded band flags miscalibration in that bin.
pub fn reliability_svg(table: &ReliabilityTable, title: &str) -> String {
    let m = table.rows.len().max(1);
    let group_width = (PLOT_RIGHT - PLOT_LEFT) / m as f64;
    let pad = group_width * 0.15;
    let gap = group_width * 0.06;
    let bar_width = (group_width - 2.0 * pad - gap) / 2.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(
        out,
        "  <text x=\"{PLOT_LEFT}\" y=\"24\" font-size=\"15\" fill=\"#222\">{}</text>",
        xml_escape(title)
    );

    // Axes and horizontal gridlines with tick labels.
    for tick in 0..=4 {
        let value = f64::from(tick) / 4.0;
        let y = y_of(value);
        let _ = writeln!(
            out,
            "  <line x1=\"{PLOT_LEFT}\" y1=\"{y:.2}\" x2=\"{PLOT_RIGHT}\" y2=\"{y:.2}\" stroke=\"#ddd\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            out,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#555\" text-anchor=\"end\">{value:.2}</text>",
            PLOT_LEFT - 8.0,
            y + 4.0
        );
    }

    for (i, row) in table.rows.iter().enumerate() {
        let x0 = PLOT_LEFT + i as f64 * group_width;
        let label = format!("{:.2}–{:.2}", row.lo, row.hi);
        let _ = writeln!(
            out,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#555\" text-anchor=\"middle\">{label}</text>",
            x0 + group_width / 2.0,
            PLOT_BOTTOM + 18.0
        );
        let _ = writeln!(
            out,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#999\" text-anchor=\"middle\">n={}</text>",
            x0 + group_width / 2.0,
            PLOT_BOTTOM + 32.0,
            row.count
        );
        if row.count == 0 {
            continue;
        }
        let (band_lo, band_hi) = (row.band_lo.unwrap(), row.band_hi.unwrap());
        let _ = writeln!(
            out,
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#888\" opacity=\"0.25\"/>",
            x0 + pad * 0.5,
            y_of(band_hi),
            group_width - pad,
            (y_of(band_lo) - y_of(band_hi)).max(0.0)
        );
        let conf = row.mean_conf.unwrap();
        let acc = row.accuracy.unwrap();
        let _ = writeln!(
            out,
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar_width:.2}\" height=\"{:.2}\" fill=\"#4878a8\"/>",
            x0 + pad,
            y_of(conf),
            (PLOT_BOTTOM - y_of(conf)).max(0.0)
        );
        let _ = writeln!(
            out,
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar_width:.2}\" height=\"{:.2}\" fill=\"#d9823b\"/>",
            x0 + pad + bar_width + gap,
            y_of(acc),
            (PLOT_BOTTOM - y_of(acc)).max(0.0)
        );
    }

    // Plot frame and legend.
    let _ = writeln!(
        out,
        "  <line x1=\"{PLOT_LEFT}\" y1=\"{PLOT_TOP}\" x2=\"{PLOT_LEFT}\" y2=\"{PLOT_BOTTOM}\" stroke=\"#333\" stroke-width=\"1\"/>"
    );
    let _ = writeln!(
        out,
        "  <line x1=\"{PLOT_LEFT}\" y1=\"{PLOT_BOTTOM}\" x2=\"{PLOT_RIGHT}\" y2=\"{PLOT_BOTTOM}\" stroke=\"#333\" stroke-width=\"1\"/>"
    );
    let legend_x = PLOT_RIGHT - 190.0;
    let _ = writeln!(
        out,
        "  <rect x=\"{legend_x:.2}\" y=\"14\" width=\"12\" height=\"12\" fill=\"#4878a8\"/>"
    );
    let _ = writeln!(
        out,
        "  <text x=\"{:.2}\" y=\"24\" font-size=\"11\" fill=\"#333\">confidence</text>",
        legend_x + 16.0
    );
    let _ = writeln!(
        out,
        "  <rect x=\"{:.2}\" y=\"14\" width=\"12\" height=\"12\" fill=\"#d9823b\"/>",
        legend_x + 96.0
    );
    let _ = writeln!(
        out,
        "  <text x=\"{:.2}\" y=\"24\" font-size=\"11\" fill=\"#333\">accuracy</text>",
        legend_x + 112.0
    );
    let band_level_pct = table.band_level * 100.0;
    let _ = writeln!(
        out,
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#777\">shaded: {band_level_pct}% band around confidence</text>",
        PLOT_LEFT,
        SVG_HEIGHT - 8.0
    );
    out.push_str("</svg>\n");
    out
}

pub fn write_reliability_svg(
    path: impl AsRef<Path>,
    table: &ReliabilityTable,
    title: &str,
) -> Result<(), ReportError> {
    let path = path.as_ref();
    fs::write(path, reliability_svg(table, title)).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Distribution of confidence scores over equal-width bins, split by outcome
/// so score separation between correct and incorrect predictions is visible.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreHistogram {
    pub bins: usize,
    pub count_correct: Vec<usize>,
    pub count_incorrect: Vec<usize>,
}

impl ScoreHistogram {
    pub fn build(scores: &[(f64, u8)], bins: usize) -> Result<Self, ReportError> {
        if scores.is_empty() {
            return Err(ReportError::EmptyInput);
        }
        if bins < 1 {
            return Err(ReportError::OutOfRange {
                what: "bins",
                value: bins as f64,
                range: "[1, ∞)",
            });
        }
        let mut count_correct = vec![0usize; bins];
        let mut count_incorrect = vec![0usize; bins];
        for &(score, label) in scores {
            if !(0.0..=1.0).contains(&score) {
                return Err(ReportError::OutOfRange {
                    what: "score",
                    value: score,
                    range: "[0, 1]",
                });
            }
            let bin = equal_width_bin(score, bins);
            if label > 1 {
                return Err(ReportError::OutOfRange {
                    what: "label",
                    value: f64::from(label),
                    range: "{0, 1}",
                });
            }
            if label == 1 {
                count_correct[bin] += 1;
            } else {
                count_incorrect[bin] += 1;
            }
        }
        Ok(Self {
            bins,
            count_correct,
            count_incorrect,
        })
    }

    pub fn total(&self) -> usize {
        self.count_correct.iter().sum::<usize>() + self.count_incorrect.iter().sum::<usize>()
    }
}

/// Renders a score histogram as CSV with one row per bin.
pub fn histogram_csv(histogram: &ScoreHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count_correct,count_incorrect\n");
    for bin in 0..histogram.bins {
        let lo = bin as f64 / histogram.bins as f64;
        let hi = (bin + 1) as f64 / histogram.bins as f64;
        let _ = writeln!(
            out,
            "{lo},{hi},{},{}",
            histogram.count_correct[bin], histogram.count_incorrect[bin]
        );
    }
    out
}

pub fn write_histogram_csv(
    path: impl AsRef<Path>,
    histogram: &ScoreHistogram,
) -> Result<(), ReportError> {
    let path = path.as_ref();
    fs::write(path, histogram_csv(histogram)).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}
