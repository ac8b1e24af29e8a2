//! Batch archive for an external trainer.
//!
//! The archive is JSONL. The first line is a manifest; every following line
//! is one labeled record group of one step:
//!
//! * `document`: the step's source document item;
//! * `task_difficulty`: constructor task items and constructor rewards;
//! * `hard_verification`: exact-match solver rewards;
//! * `soft_introspective`: reviewer soft scores and the combined solver rewards;
//! * `verbal_diagnostic`: critique-conditioned solver samples;
//! * `distill`: teacher critique samples (warm-up steps only).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::config::RunConfig;
use super::run::{completed_steps, step_dir, StepSummary, BATCHES, CONFIG_FILE, REWARDS, SUMMARY};
use super::step::realized_batch_items;
use crate::datamodel::{read_records, BatchKind, Record, RewardKind, StoreError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("unsupported archive format_version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("{0} is not a run directory (no {CONFIG_FILE})")]
    NotARun(PathBuf),
    #[error("missing step directories: {}", .0.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "))]
    Gaps(Vec<u64>),
    #[error("{file}: bad record at offset {offset}: {message}")]
    BadRecord { file: PathBuf, offset: u64, message: String },
    #[error("step {step}: {message}")]
    Count { step: u64, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub steps: usize,
    pub batch_items: u64,
}

#[derive(Serialize)]
struct Manifest {
    format_version: u32,
    steps: Vec<u64>,
    batch_items: u64,
    m: u32,
    n: u32,
    groups: [&'static str; 6],
}

#[derive(Serialize)]
struct GroupLine<'a> {
    step: u64,
    group: &'a str,
    count: usize,
    records: &'a [Value],
}

const GROUPS: [&str; 6] =
    ["document", "task_difficulty", "hard_verification", "soft_introspective", "verbal_diagnostic", "distill"];

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

fn store_err(file: &Path, e: StoreError) -> ExportError {
    match e {
        StoreError::Malformed { offset, message } => ExportError::BadRecord { file: file.to_path_buf(), offset, message },
        StoreError::SchemaVersion { offset, found } => ExportError::BadRecord {
            file: file.to_path_buf(),
            offset,
            message: format!("unsupported schema_version {found}"),
        },
        other => ExportError::Other(other.to_string()),
    }
}

/// Reads a store file, re-checking each record's invariants.
fn checked_records(file: &Path) -> Result<Vec<Record>, ExportError> {
    let records = read_records(file).map_err(|e| store_err(file, e))?;
    records
        .into_iter()
        .map(|(offset, r)| {
            r.check()
                .map_err(|v| ExportError::BadRecord { file: file.to_path_buf(), offset, message: v.to_string() })?;
            Ok(r)
        })
        .collect()
}

fn to_value(r: &Record) -> Value {
    serde_json::to_value(r).expect("records serialize")
}

/// One step's groups after validation.
fn step_groups(run_dir: &Path, step: u64, cfg: &RunConfig) -> Result<Vec<(&'static str, Vec<Value>)>, ExportError> {
    let dir = step_dir(run_dir, step);
    let summary_path = dir.join(SUMMARY);
    let summary: StepSummary = serde_json::from_slice(&fs::read(&summary_path).map_err(io(&summary_path))?)
        .map_err(|e| ExportError::Other(format!("{}: {e}", summary_path.display())))?;

    let mut groups: Vec<(&'static str, Vec<Value>)> = GROUPS.iter().map(|g| (*g, Vec::new())).collect();
    let batches = dir.join(BATCHES);
    for (offset, r) in read_records(&batches).map_err(|e| store_err(&batches, e))? {
        r.check().map_err(|v| ExportError::BadRecord { file: batches.clone(), offset, message: v.to_string() })?;
        let Record::Batch(item) = &r else {
            return Err(ExportError::BadRecord { file: batches, offset, message: "not a batch item".into() });
        };
        let g = match item.kind {
            BatchKind::Document => 0,
            BatchKind::ConstructorTask => 1,
            BatchKind::FcpSample => 4,
            BatchKind::DistillSample => 5,
        };
        groups[g].1.push(to_value(&r));
    }
    let rewards = dir.join(REWARDS);
    for r in checked_records(&rewards)? {
        let Record::Reward(rr) = &r else {
            return Err(ExportError::Other(format!("{}: unexpected record kind", rewards.display())));
        };
        let g = match rr.kind {
            RewardKind::Constructor => 1,
            RewardKind::SolverHard => 2,
            RewardKind::SolverSoft | RewardKind::SolverTotal => 3,
        };
        groups[g].1.push(to_value(&r));
    }

    let m = cfg.loop_cfg.m as u64;
    let n = cfg.loop_cfg.n as u64;
    let valid = m.saturating_sub(summary.skipped_tasks.len() as u64);
    let kind_count = |kind: &str| {
        groups
            .iter()
            .flat_map(|(_, v)| v)
            .filter(|v| v.get("kind").and_then(Value::as_str) == Some("batch"))
            .filter(|v| v.pointer("/record/kind").and_then(Value::as_str) == Some(kind))
            .count() as u64
    };
    let expected = [
        ("document", 1),
        ("constructor_task", m),
        ("fcp_sample", valid * n),
        ("distill_sample", if summary.warmup { valid * n } else { 0 }),
    ];
    for (kind, want) in expected {
        let got = kind_count(kind);
        if got != want {
            return Err(ExportError::Count { step, message: format!("{got} {kind} items, expected {want}") });
        }
    }
    let total: u64 = expected.iter().map(|(_, c)| c).sum();
    if total != realized_batch_items(m, valid, n, summary.warmup) {
        return Err(ExportError::Count { step, message: "batch accounting does not reconcile".into() });
    }
    if !summary.warmup {
        groups.retain(|(name, _)| *name != "distill");
    }
    Ok(groups)
}

/// Validates every step of `run_dir` and writes the archive to `out`.
pub fn export_batches(run_dir: &Path, out: &Path, format_version: u32) -> Result<ExportSummary, ExportError> {
    if format_version != FORMAT_VERSION {
        return Err(ExportError::UnsupportedVersion(format_version));
    }
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(ExportError::NotARun(run_dir.to_path_buf()));
    }
    let cfg = RunConfig::from_text(&fs::read_to_string(&cfg_path).map_err(io(&cfg_path))?)
        .map_err(|e| ExportError::Other(format!("{}: {e}", cfg_path.display())))?;
    let steps = completed_steps(run_dir).map_err(|e| ExportError::Other(e.to_string()))?;
    let last = steps.last().copied().unwrap_or(0);
    let gaps: Vec<u64> = (1..=last).filter(|s| steps.binary_search(s).is_err()).collect();
    if !gaps.is_empty() {
        return Err(ExportError::Gaps(gaps));
    }

    // validate everything before writing anything
    let mut per_step = Vec::with_capacity(steps.len());
    let mut batch_items = 0u64;
    for &s in &steps {
        let groups = step_groups(run_dir, s, &cfg)?;
        batch_items += groups
            .iter()
            .flat_map(|(_, v)| v)
            .filter(|v| v.get("kind").and_then(Value::as_str) == Some("batch"))
            .count() as u64;
        per_step.push((s, groups));
    }

    let file = fs::File::create(out).map_err(io(out))?;
    let mut w = BufWriter::new(file);
    let manifest = Manifest {
        format_version,
        steps: steps.clone(),
        batch_items,
        m: cfg.loop_cfg.m,
        n: cfg.loop_cfg.n,
        groups: GROUPS,
    };
    let mut put = |json: String| writeln!(w, "{json}").map_err(io(out));
    put(serde_json::json!({ "manifest": manifest }).to_string())?;
    for (step, groups) in &per_step {
        for (group, records) in groups {
            let g = GroupLine { step: *step, group, count: records.len(), records };
            put(serde_json::to_string(&g).expect("archive lines serialize"))?;
        }
    }
    w.flush().map_err(io(out))?;
    Ok(ExportSummary { steps: steps.len(), batch_items })
}
