//! Run directories.
//!
//! ```text
//! <run>/config.toml              config snapshot
//! <run>/steps/step_000001/       one directory per completed step
//!     trajectories.jsonl         document, tasks, rollouts, reviews
//!     rewards.jsonl
//!     batches.jsonl
//!     metrics.jsonl
//!     summary.json               advantage groups, objective, skipped tasks
//!     state.json                 toy parameters (latest step only)
//! ```
//!
//! A step is written under `steps/.tmp-step_NNNNNN` and renamed into place
//! once every file is synced, so a crash never leaves half a step behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use super::{io_err, Engine, EngineError, SolverGroup, StepPlan};
use crate::datamodel::{read_records, Record, RecordStore, StepMetrics};
use crate::optim::{AdvantageGroup, ObjectiveBreakdown};
use crate::toypolicy::ToyParams;

pub const CONFIG_FILE: &str = "config.toml";
pub const STEPS_DIR: &str = "steps";
pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const REWARDS: &str = "rewards.jsonl";
pub const BATCHES: &str = "batches.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const STATE: &str = "state.json";

const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: u64,
    pub warmup: bool,
    pub document_id: String,
    pub skipped_tasks: Vec<String>,
    pub constructor_group: AdvantageGroup,
    pub solver_groups: Vec<SolverGroup>,
    pub objective: ObjectiveBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Steps already on disk when the run started.
    pub resumed_from: u64,
    pub steps_run: u64,
    pub last_step: u64,
    pub final_metrics: Option<StepMetrics>,
}

pub fn step_dir_name(step: u64) -> String {
    format!("step_{step:06}")
}

pub fn step_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(STEPS_DIR).join(step_dir_name(step))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), EngineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io_err(path))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EngineError> {
    let tmp = path.with_extension("tmp");
    write_synced(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn append_all(path: &Path, records: impl IntoIterator<Item = Record>) -> Result<(), EngineError> {
    let mut store = RecordStore::open(path)?;
    for r in records {
        store.append(&r)?;
    }
    store.sync()?;
    Ok(())
}

/// Completed step numbers present in `run_dir`, ascending. Leftover
/// temporary directories from an interrupted write are removed.
pub fn completed_steps(run_dir: &Path) -> Result<Vec<u64>, EngineError> {
    let dir = run_dir.join(STEPS_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut steps = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(TMP_PREFIX) {
            fs::remove_dir_all(entry.path()).map_err(io_err(entry.path()))?;
            continue;
        }
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) {
            steps.push(n);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Writes one step directory atomically. `state` is stored with the step and
/// the previous step's copy is then dropped.
pub fn persist_step(run_dir: &Path, plan: &StepPlan, state: Option<&ToyParams>) -> Result<(), EngineError> {
    let steps = run_dir.join(STEPS_DIR);
    fs::create_dir_all(&steps).map_err(io_err(&steps))?;
    let name = step_dir_name(plan.step);
    let tmp = steps.join(format!("{TMP_PREFIX}{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;

    let trajectories = std::iter::once(Record::from(plan.document.clone()))
        .chain(plan.tasks.iter().cloned().map(Record::from))
        .chain(plan.rollouts.iter().cloned().map(Record::from))
        .chain(plan.reviews.iter().cloned().map(Record::from))
        .chain(plan.teacher_reviews.iter().cloned().map(Record::from));
    append_all(&tmp.join(TRAJECTORIES), trajectories)?;
    append_all(&tmp.join(REWARDS), plan.rewards.iter().cloned().map(Record::from))?;
    append_all(&tmp.join(BATCHES), plan.batch_items.iter().cloned().map(Record::from))?;
    append_all(&tmp.join(METRICS), [Record::from(plan.metrics.clone())])?;
    let summary = StepSummary {
        step: plan.step,
        warmup: plan.warmup,
        document_id: plan.document.id.clone(),
        skipped_tasks: plan.skipped_tasks.clone(),
        constructor_group: plan.constructor_group.clone(),
        solver_groups: plan.solver_groups.clone(),
        objective: plan.objective.clone(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| EngineError::Internal(e.to_string()))?;
    write_synced(&tmp.join(SUMMARY), &json)?;
    if let Some(params) = state {
        let json = serde_json::to_vec(params).map_err(|e| EngineError::Internal(e.to_string()))?;
        write_synced(&tmp.join(STATE), &json)?;
    }

    let dest = steps.join(&name);
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    if let Ok(d) = fs::File::open(&steps) {
        let _ = d.sync_all();
    }
    if plan.step > 1 {
        let old = step_dir(run_dir, plan.step - 1).join(STATE);
        if old.exists() {
            fs::remove_file(&old).map_err(io_err(&old))?;
        }
    }
    Ok(())
}

fn corrupt(step: u64, message: impl Into<String>) -> EngineError {
    EngineError::Corrupt { step, message: message.into() }
}

pub fn load_state(run_dir: &Path, step: u64) -> Result<ToyParams, EngineError> {
    let path = step_dir(run_dir, step).join(STATE);
    let bytes = fs::read(&path).map_err(|e| corrupt(step, format!("cannot read {}: {e}", path.display())))?;
    let params: ToyParams =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(step, format!("{}: {e}", path.display())))?;
    if !params.all_finite() || !(params.max_row_mass_error() <= 1e-12) {
        return Err(corrupt(step, "stored parameters are not a valid policy"));
    }
    Ok(params)
}

/// Metrics of every completed step, in step order.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<StepMetrics>, EngineError> {
    let mut out = Vec::new();
    for step in completed_steps(run_dir)? {
        let path = step_dir(run_dir, step).join(METRICS);
        for (offset, rec) in read_records(&path)? {
            match rec {
                Record::Metrics(m) => out.push(m),
                _ => return Err(corrupt(step, format!("{} offset {offset}: not a metrics record", path.display()))),
            }
        }
    }
    Ok(out)
}

/// Executes steps `resumed+1 ..= total_steps`, persisting each. Steps
/// already present in `run_dir` are kept; toy parameters are restored from
/// the last of them.
pub fn run(engine: &mut Engine, run_dir: &Path) -> Result<RunSummary, EngineError> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_atomic(&run_dir.join(CONFIG_FILE), engine.config().to_text().as_bytes())?;
    let done = completed_steps(run_dir)?;
    for (i, &s) in done.iter().enumerate() {
        let expect = i as u64 + 1;
        if s != expect {
            return Err(corrupt(expect, "step directory missing; cannot resume past a gap"));
        }
    }
    let resumed_from = done.len() as u64;
    if resumed_from > 0 && engine.is_toy() {
        let params = load_state(run_dir, resumed_from)?;
        engine.set_toy_params(params).map_err(|e| corrupt(resumed_from, e.to_string()))?;
    }
    let total = engine.config().loop_cfg.total_steps;
    if total > resumed_from && !engine.is_toy() {
        engine.health()?;
    }
    let mut final_metrics = None;
    let mut steps_run = 0;
    for step in resumed_from + 1..=total {
        let plan = engine.step(step)?;
        persist_step(run_dir, &plan, engine.toy_params())?;
        let m = &plan.metrics;
        info!(
            step,
            warmup = m.warmup,
            constructor_reward = m.constructor_reward_mean,
            solver_acc = m.solver_acc_mean.unwrap_or(f64::NAN),
            "step complete"
        );
        final_metrics = Some(plan.metrics);
        steps_run += 1;
    }
    if final_metrics.is_none() && resumed_from > 0 {
        final_metrics = read_metrics(run_dir)?.pop();
    }
    Ok(RunSummary { resumed_from, steps_run, last_step: resumed_from + steps_run, final_metrics })
}
