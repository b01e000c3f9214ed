//! CSV (one row per run, fixed columns) and JSON (full nested report).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunReport;
use crate::error::{invalid, Result};

pub const CSV_COLUMNS: [&str; 20] = [
    "ordering",
    "score_mode",
    "top_k",
    "noise_pos_std",
    "noise_rot_std",
    "fused_tokens",
    "payload_bytes",
    "total_bytes",
    "log2_total_bytes",
    "foreground_total",
    "foreground_retained",
    "foreground_recall",
    "aligned_recall_raw",
    "aligned_recall",
    "offset_loss",
    "flops_embed",
    "flops_encoder",
    "flops_alignment",
    "flops_fusion",
    "flops_total",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

/// A named batch of runs, one per sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub runs: Vec<RunReport>,
}

fn csv_row(r: &RunReport) -> String {
    let top_k = r.top_k.map(|k| k.to_string()).unwrap_or_else(|| "all".into());
    let score = serde_json::to_value(r.score_mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let cells: [String; 20] = [
        r.ordering.name().to_string(),
        score,
        top_k,
        r.noise_pos_std.to_string(),
        r.noise_rot_std.to_string(),
        r.fused_tokens.to_string(),
        r.comm.payload_bytes.to_string(),
        r.comm.total_bytes.to_string(),
        r.comm.log2_total_bytes.to_string(),
        r.recall.foreground_total.to_string(),
        r.recall.foreground_retained.to_string(),
        r.recall.recall.to_string(),
        r.recall.aligned_recall_raw.to_string(),
        r.recall.aligned_recall.to_string(),
        r.alignment.offset_loss.to_string(),
        r.flops.embed.to_string(),
        r.flops.encoder.to_string(),
        r.flops.alignment.to_string(),
        r.flops.fusion.to_string(),
        r.flops.total.to_string(),
    ];
    cells.join(",")
}

pub fn to_csv(runs: &[RunReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in runs {
        let _ = writeln!(out, "{}", csv_row(r));
    }
    out
}

pub fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `<out_dir>/<stem>.csv` and/or `<out_dir>/<stem>.json`.
pub fn emit_report(report: &SweepReport, format: ReportFormat, out_dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    if stem.is_empty() || stem.contains(['/', '\\']) {
        return Err(invalid(format!("bad report name {stem:?}")));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.csv"));
        fs::write(&p, to_csv(&report.runs))?;
        written.push(p);
    }
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.json"));
        fs::write(&p, to_json(report)?)?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<SweepReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Plain-text digest of a sweep, one line per run.
pub fn summarize(report: &SweepReport) -> String {
    let mut out = format!("{} ({} runs)\n", report.kind, report.runs.len());
    for r in &report.runs {
        let _ = writeln!(
            out,
            "ordering={} top_k={} noise=({}, {}) fused={} bytes={} recall={:.4} aligned={:.4} loss={:.4e} gflops={:.3}",
            r.ordering,
            r.top_k.map(|k| k.to_string()).unwrap_or_else(|| "all".into()),
            r.noise_pos_std,
            r.noise_rot_std,
            r.fused_tokens,
            r.comm.total_bytes,
            r.recall.recall,
            r.recall.aligned_recall,
            r.alignment.offset_loss,
            r.flops.total as f64 * 1e-9,
        );
    }
    out
}

/// Fixed-column CSV for a ssm timing sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanTiming {
    pub tokens: usize,
    pub d: usize,
    pub n_state: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub flops: u64,
}

pub fn scan_timings_csv(rows: &[ScanTiming]) -> String {
    let mut out = String::from("tokens,d,n_state,repeats,median_ms,flops\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.tokens, r.d, r.n_state, r.repeats, r.median_ms, r.flops);
    }
    out
}
