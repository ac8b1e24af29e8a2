//! Domain types that flow through one self-play step, plus the append-only
//! JSONL record store used for every persisted stream.
//!
//! Each line of a store file is a JSON object of the form
//! `{"schema_version": 1, "kind": "<record kind>", "record": {...}}` where the
//! inner object uses the type's field names verbatim.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::reward::MatchPolicy;

pub const SCHEMA_VERSION: u32 = 1;

/// A field-level invariant violation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("record rejected: {0}")]
    Rejected(Violation),
    #[error("write failed at offset {offset}: {source}")]
    Write { offset: u64, source: std::io::Error },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed record at offset {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("unsupported schema_version {found} at offset {offset}")]
    SchemaVersion { offset: u64, found: u64 },
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Document {
    pub fn check(&self) -> Result<(), Violation> {
        if self.text.is_empty() {
            return Err(Violation::new("text", "must be non-empty"));
        }
        if self.id.is_empty() {
            return Err(Violation::new("id", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructedTask {
    pub task_id: String,
    pub document_id: String,
    pub query: String,
    pub hidden_truth: String,
    pub thought: String,
    pub rollout_index: u32,
    pub valid: bool,
    /// Why the task was marked invalid, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_old: Option<f64>,
}

impl ConstructedTask {
    /// Structural invariants. The verbatim leak rule is applied when a task is
    /// parsed from text (it decides `valid`), not here: toy tasks over a digit
    /// alphabet legitimately repeat the hidden token elsewhere in the query.
    pub fn check(&self, m: u32) -> Result<(), Violation> {
        if self.rollout_index >= m {
            return Err(Violation::new("rollout_index", format!("must be < M ({m})")));
        }
        if self.valid && self.hidden_truth.trim().is_empty() {
            return Err(Violation::new("hidden_truth", "must be non-empty when valid"));
        }
        check_opt_logprob("logprob_old", self.logprob_old)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRollout {
    pub rollout_id: String,
    pub task_id: String,
    pub reasoning: String,
    pub answer: String,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_old: Option<f64>,
    /// False when the completion lacked the required tags; `answer` is then empty.
    #[serde(default = "default_true")]
    pub parsed: bool,
}

impl SolverRollout {
    pub fn check(&self) -> Result<(), Violation> {
        check_opt_logprob("logprob_old", self.logprob_old)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewerKind {
    #[serde(rename = "self")]
    SelfReview,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub rollout_id: String,
    pub analysis: String,
    pub critique: String,
    pub soft_score: f64,
    pub reviewer_kind: ReviewerKind,
    #[serde(default)]
    pub clamped: bool,
}

impl Review {
    pub fn check(&self) -> Result<(), Violation> {
        if !(0.0..=1.0).contains(&self.soft_score) {
            return Err(Violation::new("soft_score", "must lie in [0, 1]"));
        }
        if self.critique.trim().is_empty() {
            return Err(Violation::new("critique", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Constructor,
    SolverHard,
    SolverSoft,
    SolverTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub subject: String,
    pub kind: RewardKind,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1_used: Option<f64>,
}

impl RewardRecord {
    pub fn check(&self) -> Result<(), Violation> {
        let v = self.value;
        if !v.is_finite() {
            return Err(Violation::new("value", "must be finite"));
        }
        match self.kind {
            RewardKind::Constructor if !(0.0..=1.0).contains(&v) => {
                Err(Violation::new("value", "constructor reward must lie in [0, 1]"))
            }
            RewardKind::SolverHard if v != 0.0 && v != 1.0 => {
                Err(Violation::new("value", "hard reward must be 0 or 1"))
            }
            RewardKind::SolverSoft if !(0.0..=1.0).contains(&v) => {
                Err(Violation::new("value", "soft reward must lie in [0, 1]"))
            }
            RewardKind::SolverTotal => match self.lambda1_used {
                None => Err(Violation::new("lambda1_used", "required for solver_total")),
                Some(l) if !(0.0..=1.0 + l).contains(&v) => Err(Violation::new(
                    "value",
                    format!("solver_total must lie in [0, {}]", 1.0 + l),
                )),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Document,
    ConstructorTask,
    FcpSample,
    DistillSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPayload {
    pub prompt: String,
    pub target: String,
    /// Critique text the target is conditioned on (FCP samples only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatchItem {
    pub kind: BatchKind,
    pub payload: BatchPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    pub step: u64,
    /// Task or rollout id this item was derived from.
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_old: Option<f64>,
    /// Set on distill samples whose teacher call failed.
    #[serde(default)]
    pub failed: bool,
}

impl TrainingBatchItem {
    pub fn check(&self) -> Result<(), Violation> {
        match (self.kind, self.advantage) {
            (BatchKind::ConstructorTask | BatchKind::FcpSample, None) => {
                Err(Violation::new("advantage", "required for policy-gradient items"))
            }
            (_, Some(a)) if !a.is_finite() => Err(Violation::new("advantage", "must be finite")),
            (BatchKind::Document | BatchKind::DistillSample, Some(_)) => {
                Err(Violation::new("advantage", "not allowed on this kind"))
            }
            _ => check_opt_logprob("logprob_old", self.logprob_old),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub warmup: bool,
    pub constructor_reward_mean: f64,
    /// Absent when no task in the step was valid.
    pub solver_acc_mean: Option<f64>,
    pub fcp_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_estimate: Option<f64>,
    pub valid_task_fraction: f64,
    /// Fraction of valid tasks whose solver group scored zero exact matches.
    pub zero_acc_task_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_loss: Option<f64>,
    pub total_objective: f64,
    #[serde(default)]
    pub no_valid_tasks: bool,
}

impl StepMetrics {
    pub fn check(&self) -> Result<(), Violation> {
        if !(0.0..=1.0).contains(&self.valid_task_fraction) {
            return Err(Violation::new("valid_task_fraction", "must lie in [0, 1]"));
        }
        let fields = [
            ("constructor_reward_mean", Some(self.constructor_reward_mean)),
            ("solver_acc_mean", self.solver_acc_mean),
            ("fcp_loss", self.fcp_loss),
            ("entropy_estimate", self.entropy_estimate),
            ("zero_acc_task_fraction", self.zero_acc_task_fraction),
            ("distill_loss", self.distill_loss),
            ("total_objective", Some(self.total_objective)),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Violation::new(name, "must be finite"));
                }
            }
        }
        Ok(())
    }
}

fn check_opt_logprob(field: &str, lp: Option<f64>) -> Result<(), Violation> {
    match lp {
        Some(v) if !v.is_finite() || v > 0.0 => {
            Err(Violation::new(field, "must be a finite log-probability (<= 0)"))
        }
        _ => Ok(()),
    }
}

fn default_true() -> bool {
    true
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Loop hyperparameters. Defaults follow the reference training recipe:
/// 8 tasks per document, 16 solutions per task, temperature 1.0, clip band
/// [0.2, 0.28], zero KL, lambda1 1.0/0.6 around a 16-token threshold,
/// lambda2 0.5 and a 256-step warm-up inside 2048 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub m: u32,
    pub n: u32,
    pub temperature: f64,
    pub eps_clip_low: f64,
    pub eps_clip_high: f64,
    pub alpha_kl: f64,
    pub beta_kl: f64,
    pub lambda1_long: f64,
    pub lambda1_short: f64,
    pub lambda1_threshold_tokens: i64,
    pub lambda2: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub gate_epsilon: f64,
    pub seed: u64,
    /// Turns the validity gate off (difficulty reward for every task).
    pub gate_enabled: bool,
    pub sigma_floor: f64,
    pub match_policy: MatchPolicy,
    /// Reviewer samples averaged into one soft score.
    pub review_samples: u32,
    /// Extra weight on FCP samples whose hard reward is 0.
    pub fcp_negative_weight: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 16,
            temperature: 1.0,
            eps_clip_low: 0.2,
            eps_clip_high: 0.28,
            alpha_kl: 0.0,
            beta_kl: 0.0,
            lambda1_long: 1.0,
            lambda1_short: 0.6,
            lambda1_threshold_tokens: 16,
            lambda2: 0.5,
            warmup_steps: 256,
            total_steps: 2048,
            gate_epsilon: 0.0,
            seed: 0,
            gate_enabled: true,
            sigma_floor: 1e-8,
            match_policy: MatchPolicy::default(),
            review_samples: 1,
            fcp_negative_weight: 1.0,
        }
    }
}

/// Returns every invariant violation of `cfg`; empty means valid.
pub fn validate_config(cfg: &LoopConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if cfg.m < 1 {
        out.push(Violation::new("M", "M must be ≥ 1"));
    }
    if cfg.n < 1 {
        out.push(Violation::new("N", "N must be ≥ 1"));
    }
    if !(cfg.temperature.is_finite() && cfg.temperature >= 0.0) {
        out.push(Violation::new("temperature", "temperature must be ≥ 0"));
    }
    if !(cfg.eps_clip_low > 0.0) {
        out.push(Violation::new("eps_clip_low", "eps_clip_low must be > 0"));
    }
    if cfg.eps_clip_low > cfg.eps_clip_high {
        out.push(Violation::new("eps_clip_high", "eps_clip_low must be ≤ eps_clip_high"));
    }
    if cfg.lambda1_threshold_tokens < 0 {
        out.push(Violation::new(
            "lambda1_threshold_tokens",
            "lambda1_threshold_tokens must be ≥ 0",
        ));
    }
    if cfg.warmup_steps > cfg.total_steps {
        out.push(Violation::new("warmup_steps", "warmup_steps must be ≤ total_steps"));
    }
    if !(0.0..1.0).contains(&cfg.gate_epsilon) {
        out.push(Violation::new("gate_epsilon", "gate_epsilon must lie in [0, 1)"));
    }
    if !(cfg.sigma_floor >= 0.0) {
        out.push(Violation::new("sigma_floor", "sigma_floor must be ≥ 0"));
    }
    if cfg.review_samples < 1 {
        out.push(Violation::new("review_samples", "review_samples must be ≥ 1"));
    }
    for (name, v) in [
        ("alpha_kl", cfg.alpha_kl),
        ("beta_kl", cfg.beta_kl),
        ("lambda1_long", cfg.lambda1_long),
        ("lambda1_short", cfg.lambda1_short),
        ("lambda2", cfg.lambda2),
        ("fcp_negative_weight", cfg.fcp_negative_weight),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            out.push(Violation::new(name, format!("{name} must be finite and ≥ 0")));
        }
    }
    out
}

/// Items one self-play step contributes to the training batch: the document,
/// M constructor tasks, M·N FCP samples, and during warm-up another M·N
/// teacher-distillation samples.
pub fn count_batch_items(m: u64, n: u64, warmup: bool) -> u64 {
    let rollouts = m * n;
    1 + m + if warmup { 2 * rollouts } else { rollouts }
}

// ---------------------------------------------------------------------------
// Record store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
pub enum Record {
    Document(Document),
    Task(ConstructedTask),
    Rollout(SolverRollout),
    Review(Review),
    Reward(RewardRecord),
    Batch(TrainingBatchItem),
    Metrics(StepMetrics),
}

impl Record {
    pub fn check(&self) -> Result<(), Violation> {
        match self {
            Record::Document(d) => d.check(),
            Record::Task(t) => t.check(u32::MAX),
            Record::Rollout(r) => r.check(),
            Record::Review(r) => r.check(),
            Record::Reward(r) => r.check(),
            Record::Batch(b) => b.check(),
            Record::Metrics(m) => m.check(),
        }
    }
}

macro_rules! impl_from_record {
    ($($variant:ident($ty:ty)),*) => {
        $(impl From<$ty> for Record {
            fn from(v: $ty) -> Self { Record::$variant(v) }
        })*
    };
}

impl_from_record!(
    Document(Document),
    Task(ConstructedTask),
    Rollout(SolverRollout),
    Review(Review),
    Reward(RewardRecord),
    Batch(TrainingBatchItem),
    Metrics(StepMetrics)
);

#[derive(Serialize, Deserialize)]
struct Line {
    schema_version: u64,
    #[serde(flatten)]
    record: Record,
}

/// Serializes one record as a store line, without the trailing newline.
pub fn encode_record(record: &Record) -> String {
    serde_json::to_string(&Line { schema_version: SCHEMA_VERSION as u64, record: record.clone() })
        .expect("records always serialize")
}

pub fn decode_record(line: &str, offset: u64) -> Result<Record, StoreError> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| StoreError::Malformed { offset, message: e.to_string() })?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != SCHEMA_VERSION as u64 {
        return Err(StoreError::SchemaVersion { offset, found });
    }
    let parsed: Line = serde_json::from_value(value)
        .map_err(|e| StoreError::Malformed { offset, message: e.to_string() })?;
    Ok(parsed.record)
}

/// Single-writer append-only JSONL store. Offsets are byte positions of each
/// line's first byte.
pub struct RecordStore {
    path: PathBuf,
    file: File,
    end: u64,
}

impl RecordStore {
    /// Opens (creating if needed) `path` for appending. A trailing partial line
    /// left by an interrupted writer is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io { path: path.clone(), source };
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        let complete = complete_prefix_len(&mut file).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        if complete != len {
            file.set_len(complete).map_err(io)?;
        }
        Ok(Self { path, file, end: complete })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &Record) -> Result<u64, StoreError> {
        record.check().map_err(StoreError::Rejected)?;
        let mut line = encode_record(record);
        line.push('\n');
        let offset = self.end;
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| StoreError::Write { offset, source })?;
        self.end += line.len() as u64;
        Ok(offset)
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.file
            .sync_data()
            .map_err(|source| StoreError::Io { path: self.path.clone(), source })
    }
}

/// Reads every complete record of a store file with its offset. A final line
/// without a newline is never returned.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(u64, Record)>, StoreError> {
    let path = path.as_ref();
    let io = |source| StoreError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io)?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io)?;
        if n == 0 || !buf.ends_with('\n') {
            break;
        }
        out.push((offset, decode_record(buf.trim_end_matches('\n'), offset)?));
        offset += n as u64;
    }
    Ok(out)
}

/// Reads the record that starts at `offset`.
pub fn read_record_at(path: impl AsRef<Path>, offset: u64) -> Result<Record, StoreError> {
    let path = path.as_ref();
    let io = |source| StoreError::Io { path: path.to_path_buf(), source };
    let mut file = File::open(path).map_err(io)?;
    file.seek(SeekFrom::Start(offset)).map_err(io)?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line).map_err(io)?;
    if !line.ends_with('\n') {
        return Err(StoreError::Malformed { offset, message: "no complete record".into() });
    }
    decode_record(line.trim_end_matches('\n'), offset)
}

fn complete_prefix_len(file: &mut File) -> std::io::Result<u64> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&mut *file);
    let mut complete = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            break;
        }
        complete += n as u64;
    }
    Ok(complete)
}
