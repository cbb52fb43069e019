//! Serializable result mirrors and plot-ready tables.
//!
//! Recovery results hold live `Field`s and complex spectra; the mirrors here
//! flatten them into plain numbers for JSON persistence. Tables are CSV with
//! a `quantity,truth,recovered,abs_err,rel_err` header and every number
//! printed with 17 significant digits, so parsing a table back reproduces
//! the report values bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::recovery::{KernelRecovery, MatrixRecovery, NormalizationRecovery};

/// Render a float with 17 significant digits — enough for a lossless
/// round trip through decimal text.
pub fn format_float(value: f64) -> String {
    format!("{value:.16e}")
}

/// One row of a comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub quantity: String,
    pub truth: f64,
    pub recovered: f64,
}

impl ComparisonRow {
    pub fn new(quantity: impl Into<String>, truth: f64, recovered: f64) -> Self {
        ComparisonRow {
            quantity: quantity.into(),
            truth,
            recovered,
        }
    }

    pub fn abs_err(&self) -> f64 {
        (self.recovered - self.truth).abs()
    }

    /// Relative error; falls back to the absolute error at zero truth.
    pub fn rel_err(&self) -> f64 {
        if self.truth == 0.0 {
            self.abs_err()
        } else {
            self.abs_err() / self.truth.abs()
        }
    }
}

fn csv_escape(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Render comparison rows as CSV text (header always present).
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("quantity,truth,recovered,abs_err,rel_err\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_escape(&row.quantity),
            format_float(row.truth),
            format_float(row.recovered),
            format_float(row.abs_err()),
            format_float(row.rel_err()),
        );
    }
    out
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    std::fs::write(path, comparison_csv(rows))?;
    Ok(())
}

/// Render a two-column figure table (x, y) as CSV text.
pub fn xy_csv(x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", csv_escape(x_label), csv_escape(y_label));
    for (x, y) in points {
        let _ = writeln!(out, "{},{}", format_float(*x), format_float(*y));
    }
    out
}

pub fn write_xy_csv(
    path: &Path,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> Result<()> {
    std::fs::write(path, xy_csv(x_label, y_label, points))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Recovery mirrors
// ---------------------------------------------------------------------------

/// Serializable mirror of one recovered coupling entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixEntryReport {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub residual: f64,
    pub probes: Vec<String>,
}

/// Serializable mirror of a recovered coupling matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixReport {
    /// Which coupling this matrix parameterizes (for example "mu" or "nu").
    pub kind: String,
    pub values: Vec<Vec<f64>>,
    pub entries: Vec<MatrixEntryReport>,
}

impl MatrixReport {
    pub fn from_recovery(kind: &str, recovery: &MatrixRecovery) -> Self {
        MatrixReport {
            kind: kind.to_string(),
            values: recovery.values.clone(),
            entries: recovery
                .entries
                .iter()
                .map(|e| MatrixEntryReport {
                    row: e.row,
                    col: e.col,
                    value: e.value,
                    residual: e.residual,
                    probes: e.probes.clone(),
                })
                .collect(),
        }
    }

    /// Comparison rows against a known truth matrix.
    pub fn comparison_rows(&self, truth: &[Vec<f64>]) -> Vec<ComparisonRow> {
        self.entries
            .iter()
            .map(|e| {
                ComparisonRow::new(
                    format!("{}[{}][{}]", self.kind, e.row, e.col),
                    truth[e.row][e.col],
                    e.value,
                )
            })
            .collect()
    }
}

/// Serializable mirror of one recovered normalization constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationEntryReport {
    pub row: usize,
    pub col: usize,
    pub constant: f64,
    pub scale: f64,
    pub divergence_integral: f64,
    pub flagged_zero: bool,
    pub probes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub entries: Vec<NormalizationEntryReport>,
}

impl NormalizationReport {
    pub fn from_recovery(entries: &[NormalizationRecovery]) -> Self {
        NormalizationReport {
            entries: entries
                .iter()
                .map(|e| NormalizationEntryReport {
                    row: e.row,
                    col: e.col,
                    constant: e.constant,
                    scale: e.scale,
                    divergence_integral: e.divergence_integral,
                    flagged_zero: e.flagged_zero,
                    probes: e.probes.clone(),
                })
                .collect(),
        }
    }

    pub fn comparison_rows(&self, truth: &[Vec<f64>]) -> Vec<ComparisonRow> {
        self.entries
            .iter()
            .map(|e| {
                ComparisonRow::new(
                    format!("normalization[{}][{}]", e.row, e.col),
                    truth[e.row][e.col],
                    e.constant,
                )
            })
            .collect()
    }
}

/// Serializable mirror of one recovered kernel transform coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelModeReport {
    pub mode: Vec<i64>,
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    pub phase: f64,
    pub probe: String,
}

/// Serializable mirror of a kernel frequency sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelReport {
    pub cutoff: i64,
    pub modes: Vec<KernelModeReport>,
    pub gaps: Vec<Vec<i64>>,
}

impl KernelReport {
    pub fn from_recovery(recovery: &KernelRecovery) -> Self {
        KernelReport {
            cutoff: recovery.cutoff,
            modes: recovery
                .table
                .iter()
                .map(|m| KernelModeReport {
                    mode: m.mode.clone(),
                    re: m.value.re,
                    im: m.value.im,
                    modulus: m.value.norm(),
                    phase: m.value.arg(),
                    probe: m.probe.clone(),
                })
                .collect(),
            gaps: recovery.gaps.clone(),
        }
    }

    /// Modulus/phase table with one row per recovered mode.
    pub fn mode_table_csv(&self) -> String {
        let mut out = String::from("mode,re,im,modulus,phase\n");
        for m in &self.modes {
            let label: Vec<String> = m.mode.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_escape(&label.join(";")),
                format_float(m.re),
                format_float(m.im),
                format_float(m.modulus),
                format_float(m.phase),
            );
        }
        out
    }
}
