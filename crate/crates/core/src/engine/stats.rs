//! Windowed summaries of a run's metrics stream.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::run::read_metrics;
use super::EngineError;
use crate::datamodel::StepMetrics;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("no data")]
    NoData,
    #[error("window must be ≥ 1")]
    ZeroWindow,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    pub first_step: u64,
    pub last_step: u64,
    pub steps: usize,
    pub constructor_reward: f64,
    pub solver_acc: Option<f64>,
    pub fcp_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    pub valid_task_fraction: f64,
    pub zero_acc_task_fraction: Option<f64>,
}

/// Mean over the values that are present; `None` when none are.
fn mean_present(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = xs.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Consecutive windows of `window` steps; the last may be shorter.
pub fn window_stats(metrics: &[StepMetrics], window: usize) -> Result<Vec<WindowStats>, StatsError> {
    if window == 0 {
        return Err(StatsError::ZeroWindow);
    }
    if metrics.is_empty() {
        return Err(StatsError::NoData);
    }
    Ok(metrics
        .chunks(window)
        .map(|w| WindowStats {
            first_step: w[0].step,
            last_step: w[w.len() - 1].step,
            steps: w.len(),
            constructor_reward: mean_present(w.iter().map(|m| Some(m.constructor_reward_mean))).unwrap_or(0.0),
            solver_acc: mean_present(w.iter().map(|m| m.solver_acc_mean)),
            fcp_loss: mean_present(w.iter().map(|m| m.fcp_loss)),
            entropy: mean_present(w.iter().map(|m| m.entropy_estimate)),
            valid_task_fraction: mean_present(w.iter().map(|m| Some(m.valid_task_fraction))).unwrap_or(0.0),
            zero_acc_task_fraction: mean_present(w.iter().map(|m| m.zero_acc_task_fraction)),
        })
        .collect())
}

pub fn run_stats(run_dir: &Path, window: usize) -> Result<Vec<WindowStats>, StatsError> {
    window_stats(&read_metrics(run_dir)?, window)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table. The entropy column only appears when some window has it.
pub fn render_table(rows: &[WindowStats]) -> String {
    let with_entropy = rows.iter().any(|r| r.entropy.is_some());
    let mut out = String::new();
    let _ = write!(out, "{:>13}  {:>11}  {:>10}  {:>10}", "steps", "constructor", "solver_acc", "fcp_loss");
    if with_entropy {
        let _ = write!(out, "  {:>10}", "entropy");
    }
    let _ = writeln!(out, "  {:>10}  {:>9}", "valid_frac", "zero_acc");
    for r in rows {
        let span = format!("{}-{}", r.first_step, r.last_step);
        let _ = write!(
            out,
            "{:>13}  {:>11.4}  {:>10}  {:>10}",
            span,
            r.constructor_reward,
            cell(r.solver_acc),
            cell(r.fcp_loss)
        );
        if with_entropy {
            let _ = write!(out, "  {:>10}", cell(r.entropy));
        }
        let _ = writeln!(out, "  {:>10.4}  {:>9}", r.valid_task_fraction, cell(r.zero_acc_task_fraction));
    }
    out
}
