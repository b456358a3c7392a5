// SPDX-License-Identifier: Apache-2.0

//! CSV report files.
//!
//! * `boottime_<scenario>.csv`: `Type,p95,p95_change,stddev`
//! * `cdf_<scenario>_<setup>.csv`: `ms,fraction`
//! * `memoverhead.csv`: `Type,kb_overhead,change`
//! * `samples_<scenario>_<setup>.csv`: raw boot records

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::stats::{SampleSet, StatsError};
use crate::microvm::{BootRecord, OverheadBreakdown, Setup, BOOT_RECORD_CSV_HEADER};

pub const BOOTTIME_HEADER: &str = "Type,p95,p95_change,stddev";
pub const CDF_HEADER: &str = "ms,fraction";
pub const MEMOVERHEAD_HEADER: &str = "Type,kb_overhead,change";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("baseline `{0}` is not among the sample sets")]
    MissingBaseline(String),
    #[error("set `{label}`: {source}")]
    Stats {
        label: String,
        #[source]
        source: StatsError,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

/// Signed percentage with two decimals; zero prints without a sign.
pub fn format_change(fraction: f64) -> String {
    let pct = format!("{:+.2}", fraction * 100.0);
    if pct == "+0.00" || pct == "-0.00" {
        "0.00%".to_string()
    } else {
        format!("{pct}%")
    }
}

/// Inverse of `format_change`, as a fraction.
pub fn parse_change(s: &str) -> Option<f64> {
    let pct: f64 = s.strip_suffix('%')?.parse().ok()?;
    Some(pct / 100.0)
}

pub fn boottime_csv(sets: &[SampleSet], baseline_label: &str) -> Result<String, ReportError> {
    let baseline = sets
        .iter()
        .find(|s| s.label == baseline_label)
        .ok_or_else(|| ReportError::MissingBaseline(baseline_label.to_string()))?;
    let stats_of = |s: &SampleSet| {
        s.stats().map_err(|source| ReportError::Stats {
            label: s.label.clone(),
            source,
        })
    };
    let base_p95 = stats_of(baseline)?.p95;
    let mut out = format!("{BOOTTIME_HEADER}\n");
    for set in sets {
        let st = stats_of(set)?;
        let change = if set.label == baseline_label {
            0.0
        } else {
            (st.p95 - base_p95) / base_p95
        };
        writeln!(
            out,
            "{},{:.3},{},{:.3}",
            set.label,
            st.p95,
            format_change(change),
            st.stddev
        )
        .unwrap();
    }
    Ok(out)
}

pub fn cdf_csv(set: &SampleSet) -> String {
    let mut out = format!("{CDF_HEADER}\n");
    for (ms, frac) in set.cdf() {
        writeln!(out, "{ms:.6},{frac:.6}").unwrap();
    }
    out
}

/// One row of the memory table: a label and accounted bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryRow {
    pub label: String,
    pub bytes: u64,
}

impl MemoryRow {
    pub fn new(label: impl Into<String>, bytes: u64) -> Self {
        MemoryRow {
            label: label.into(),
            bytes,
        }
    }
}

/// `baseline`, `vtpm-vmm` (VMM-side TPM additions only) and
/// `vtpm-vmm+backend`.
pub fn memory_rows(b: &OverheadBreakdown) -> Vec<MemoryRow> {
    vec![
        MemoryRow::new("baseline", b.vmm_only(Setup::Baseline)),
        MemoryRow::new("vtpm-vmm", b.vmm_only(Setup::Pool)),
        MemoryRow::new("vtpm-vmm+backend", b.total(Setup::Pool)),
    ]
}

/// The first row is the reference for the `change` column.
pub fn memoverhead_csv(rows: &[MemoryRow]) -> String {
    let mut out = format!("{MEMOVERHEAD_HEADER}\n");
    let Some(base) = rows.first() else {
        return out;
    };
    for r in rows {
        let change = (r.bytes as f64 - base.bytes as f64) / base.bytes as f64;
        writeln!(
            out,
            "{},{:.2},{}",
            r.label,
            r.bytes as f64 / 1024.0,
            format_change(change)
        )
        .unwrap();
    }
    out
}

pub fn samples_csv(records: &[BootRecord]) -> String {
    let mut out = format!("{BOOT_RECORD_CSV_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_samples_csv(path: &Path, text: &str) -> Result<Vec<BootRecord>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == BOOT_RECORD_CSV_HEADER => {}
        _ => {
            return Err(ReportError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            BootRecord::parse_csv_row(l).map_err(|msg| ReportError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Durations in milliseconds, in record order.
pub fn samples_ms(records: &[BootRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| r.t_total.as_nanos() as f64 / 1e6)
        .collect()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&path, contents))
        .map_err(|source| ReportError::IoFailure {
            path: path.clone(),
            source,
        })?;
    Ok(path)
}

pub fn write_samples(dir: &Path, scenario: &str, setup: &str, records: &[BootRecord]) -> Result<PathBuf, ReportError> {
    write(dir, &format!("samples_{scenario}_{setup}.csv"), &samples_csv(records))
}

pub fn write_memoverhead(dir: &Path, rows: &[MemoryRow]) -> Result<PathBuf, ReportError> {
    write(dir, "memoverhead.csv", &memoverhead_csv(rows))
}

/// Writes the boot-time table, one CDF file per set and the memory table.
/// Returns the written paths.
pub fn emit_report(
    dir: &Path,
    scenario: &str,
    sets: &[SampleSet],
    baseline_label: &str,
    memory: &[MemoryRow],
) -> Result<Vec<PathBuf>, ReportError> {
    let table = boottime_csv(sets, baseline_label)?;
    let mut written = vec![write(dir, &format!("boottime_{scenario}.csv"), &table)?];
    for set in sets {
        written.push(write(dir, &format!("cdf_{scenario}_{}.csv", set.label), &cdf_csv(set))?);
    }
    written.push(write_memoverhead(dir, memory)?);
    Ok(written)
}

/// Parsed `boottime_*.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct BoottimeRow {
    pub label: String,
    pub p95: f64,
    pub p95_change: f64,
    pub stddev: f64,
}

pub fn parse_boottime_csv(text: &str) -> Result<Vec<BoottimeRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(BOOTTIME_HEADER) {
        return Err("missing header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(format!("bad row `{l}`"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
            Ok(BoottimeRow {
                label: f[0].to_string(),
                p95: num(f[1])?,
                p95_change: parse_change(f[2]).ok_or_else(|| format!("bad change `{}`", f[2]))?,
                stddev: num(f[3])?,
            })
        })
        .collect()
}
