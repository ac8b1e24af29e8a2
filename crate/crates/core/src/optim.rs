//! Group-relative advantages, the clipped surrogate, likelihood losses and the
//! unified objective with its coefficient schedules.

use serde::{Deserialize, Serialize};

use crate::datamodel::LoopConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite reward at index {0}")]
    NonFinite(usize),
    #[error("empty group")]
    EmptyGroup,
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("improper distribution: log-probability {value} > 0 at index {index}")]
    ImproperDistribution { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// Standardizes rewards within a group using the population standard
/// deviation. Groups whose spread is below `sigma_floor` carry no signal and
/// get all-zero advantages.
pub fn normalize_group(rewards: &[f64], sigma_floor: f64) -> Result<AdvantageGroup, OptimError> {
    if rewards.is_empty() {
        return Err(OptimError::EmptyGroup);
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(OptimError::NonFinite(i));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let degenerate = !(sigma >= sigma_floor) || sigma == 0.0;
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / sigma).collect()
    };
    Ok(AdvantageGroup { rewards: rewards.to_vec(), advantages, degenerate })
}

/// `min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)`.
pub fn clipped_term(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps_low, 1.0 + eps_high);
    (rho * advantage).min(clipped * advantage)
}

/// True when the clipped branch is strictly smaller, so the term is flat in rho.
pub fn clip_active(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> bool {
    (advantage > 0.0 && rho > 1.0 + eps_high) || (advantage < 0.0 && rho < 1.0 - eps_low)
}

/// Mean clipped surrogate over `(rho, advantage)` terms minus the KL penalty.
pub fn grpo_objective(
    terms: &[(f64, f64)],
    eps_low: f64,
    eps_high: f64,
    kl_coeff: f64,
    kl_value: f64,
) -> f64 {
    let surrogate = if terms.is_empty() {
        0.0
    } else {
        terms.iter().map(|&(rho, a)| clipped_term(rho, a, eps_low, eps_high)).sum::<f64>()
            / terms.len() as f64
    };
    if kl_coeff == 0.0 {
        surrogate
    } else {
        surrogate - kl_coeff * kl_value
    }
}

fn mean_nll(logprobs: &[f64]) -> Result<f64, OptimError> {
    if logprobs.is_empty() {
        return Err(OptimError::EmptySampleSet);
    }
    if let Some((index, &value)) = logprobs.iter().enumerate().find(|(_, &lp)| lp > 0.0 || lp.is_nan()) {
        return Err(OptimError::ImproperDistribution { index, value });
    }
    Ok(-logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Critique-conditioned negative log-likelihood, averaged over all M·N samples.
pub fn fcp_loss(logprobs: &[f64]) -> Result<f64, OptimError> {
    mean_nll(logprobs)
}

/// Negative log-likelihood of teacher critiques.
pub fn distill_loss(logprobs_of_teacher_critiques: &[f64]) -> Result<f64, OptimError> {
    mean_nll(logprobs_of_teacher_critiques)
}

/// Distillation weight: on through the last warm-up step, off afterwards.
pub fn lambda3_schedule(step: u64, warmup_steps: u64) -> f64 {
    if step <= warmup_steps {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub j_const: f64,
    pub j_solver: f64,
    pub l_fcp: f64,
    pub l_distill: f64,
    pub total: f64,
    pub step: u64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl ObjectiveBreakdown {
    pub fn is_consistent(&self) -> bool {
        let expect =
            self.j_const + self.j_solver - self.lambda2 * self.l_fcp - self.lambda3 * self.l_distill;
        (self.total - expect).abs() <= 1e-12
    }
}

pub fn total_objective(
    j_const: f64,
    j_solver: f64,
    l_fcp: f64,
    l_distill: f64,
    step: u64,
    cfg: &LoopConfig,
) -> ObjectiveBreakdown {
    let lambda3 = lambda3_schedule(step, cfg.warmup_steps);
    let total = j_const + j_solver - cfg.lambda2 * l_fcp - lambda3 * l_distill;
    ObjectiveBreakdown { j_const, j_solver, l_fcp, l_distill, total, step, lambda2: cfg.lambda2, lambda3 }
}
