//! Summary rows, summary files and the comparison report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{BenchError, Result};

pub const SUMMARY_HEADER: &str = "# mfrl-summary v1";
pub const SUMMARY_COLUMNS: &str = "controller,r_mode,mcc_mean,mcc_std,replications";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RMode {
    Zero,
    Nonzero,
}

impl RMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RMode::Zero => "zero",
            RMode::Nonzero => "nonzero",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(RMode::Zero),
            "nonzero" => Some(RMode::Nonzero),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub controller: String,
    pub r_mode: RMode,
    pub mcc_mean: f64,
    /// Sample standard deviation; 0 for a single replication.
    pub mcc_std: f64,
    pub replications: usize,
}

impl SummaryRow {
    pub fn from_mccs(controller: &str, r_mode: RMode, mccs: &[f64]) -> Self {
        let k = mccs.len();
        let mean = mccs.iter().sum::<f64>() / k as f64;
        let std = if k > 1 {
            (mccs.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        SummaryRow {
            controller: controller.to_string(),
            r_mode,
            mcc_mean: mean,
            mcc_std: std,
            replications: k,
        }
    }

    fn label(&self) -> String {
        format!("{}[{}]", self.controller, self.r_mode.as_str())
    }
}

fn summary_text(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n{SUMMARY_COLUMNS}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.controller, r.r_mode.as_str(), r.mcc_mean, r.mcc_std, r.replications).unwrap();
    }
    s
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::write(path, summary_text(rows))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = path.display().to_string();
    let bad = |msg: String| BenchError::Summary { file: file.clone(), msg };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(bad(format!("missing '{SUMMARY_HEADER}' header")));
    }
    if lines.next() != Some(SUMMARY_COLUMNS) {
        return Err(bad("unexpected column header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("row {}: expected 5 fields", i + 1)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
            Ok(SummaryRow {
                controller: f[0].to_string(),
                r_mode: RMode::parse(f[1]).ok_or_else(|| bad(format!("row {}: bad r_mode '{}'", i + 1, f[1])))?,
                mcc_mean: num(f[2])?,
                mcc_std: num(f[3])?,
                replications: f[4].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?,
            })
        })
        .collect()
}

/// Reads every `*_summary.csv` in `dir`, in file-name order.
pub fn collect_summaries(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.csv")))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_summary(&f)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub summary_csv: String,
    /// `numerator,denominator,ratio` for every ordered pair of rows.
    pub ratios_csv: String,
    pub ratios: Vec<(String, String, f64)>,
}

pub fn compare_report(rows: &[SummaryRow]) -> Report {
    let width = rows.iter().map(|r| r.label().len()).max().unwrap_or(0).max(10);
    let mut table = format!(
        "{:<width$}  {:>14}  {:>14}  {:>6}\n",
        "controller", "mean MCC", "std MCC", "reps"
    );
    for r in rows {
        writeln!(
            table,
            "{:<width$}  {:>14.6e}  {:>14.6e}  {:>6}",
            r.label(),
            r.mcc_mean,
            r.mcc_std,
            r.replications
        )
        .unwrap();
    }
    let mut ratios = Vec::new();
    for a in rows {
        for b in rows {
            if a.label() != b.label() {
                ratios.push((a.label(), b.label(), a.mcc_mean / b.mcc_mean));
            }
        }
    }
    if !ratios.is_empty() {
        table.push_str("\nMCC ratios (row / column)\n");
        for (a, b, r) in &ratios {
            writeln!(table, "{a} / {b} = {r:.4}").unwrap();
        }
    }
    let mut ratios_csv = String::from("# mfrl-ratios v1\nnumerator,denominator,ratio\n");
    for (a, b, r) in &ratios {
        writeln!(ratios_csv, "{a},{b},{r}").unwrap();
    }
    Report {
        table,
        summary_csv: summary_text(rows),
        ratios_csv,
        ratios,
    }
}
