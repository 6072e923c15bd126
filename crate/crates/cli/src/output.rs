//! Log and report files written next to a checkpoint.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use resrep::ablation::MinimalStructure;
use resrep::checkpoint::write_atomic;
use resrep::report::WidthReport;
use resrep::resrep::SelectionEvent;
use resrep::train::EpochLog;
use serde::Serialize;

/// `dir/name.rsrp` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn csv_rows<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

pub fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut bytes = csv_rows(logs)?;
    if logs.is_empty() {
        bytes = b"epoch,lr,loss,accuracy,surviving_sq,pruned_sq\n".to_vec();
    }
    write(path, &bytes)
}

pub fn write_events(path: &Path, events: &[SelectionEvent]) -> Result<()> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    write(path, &out)
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    surviving_sq: f64,
    pruned_sq: f64,
}

pub fn write_trace(path: &Path, trace: &[(usize, f64, f64)]) -> Result<()> {
    let mut bytes = csv_rows(trace.iter().map(|&(epoch, surviving_sq, pruned_sq)| TraceRow {
        epoch,
        surviving_sq,
        pruned_sq,
    }))?;
    if trace.is_empty() {
        bytes = b"epoch,surviving_sq,pruned_sq\n".to_vec();
    }
    write(path, &bytes)
}

#[derive(Serialize)]
struct WidthRow<'a> {
    index: usize,
    name: &'a str,
    original_width: usize,
    final_width: usize,
}

/// Per-layer CSV plus the full report as JSON.
pub fn write_width_report(out: &Path, report: &WidthReport) -> Result<(PathBuf, PathBuf)> {
    let csv_path = sibling(out, "widths.csv");
    let json_path = sibling(out, "widths.json");
    let rows = report.layers.iter().map(|l| WidthRow {
        index: l.target,
        name: &l.name,
        original_width: l.original,
        final_width: l.final_width,
    });
    write(&csv_path, &csv_rows(rows)?)?;
    write(&json_path, &serde_json::to_vec_pretty(report)?)?;
    Ok((csv_path, json_path))
}

pub fn write_minimal(path: &Path, ms: &MinimalStructure) -> Result<()> {
    write(path, &serde_json::to_vec_pretty(ms)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn siblings_replace_the_extension() {
        assert_eq!(sibling(Path::new("runs/rr.rsrp"), "log.csv"), PathBuf::from("runs/rr.log.csv"));
        assert_eq!(sibling(Path::new("model"), "trace.csv"), PathBuf::from("model.trace.csv"));
    }

    #[test]
    fn empty_logs_still_carry_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,surviving_sq,pruned_sq\n");
        write_trace(&path, &[(0, 1.5, 0.25)]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,surviving_sq,pruned_sq\n0,1.5,0.25\n");
    }
}
