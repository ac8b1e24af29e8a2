//! Scalar reward kernels: exact match, group accuracy, the validity-gated
//! constructor reward, the length-dependent soft-reward weight and the hybrid
//! solver reward.

use serde::{Deserialize, Serialize};

use crate::datamodel::LoopConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub trim_outer: bool,
    pub collapse_inner_whitespace: bool,
    pub case_sensitive: bool,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self { trim_outer: true, collapse_inner_whitespace: true, case_sensitive: true }
    }
}

impl MatchPolicy {
    pub fn normalize(&self, text: &str) -> String {
        let mut s: String = if self.trim_outer { text.trim().to_string() } else { text.to_string() };
        if self.collapse_inner_whitespace {
            let lead = if self.trim_outer { "" } else { leading_ws(&s) };
            let trail = if self.trim_outer { "" } else { trailing_ws(&s) };
            let inner = s.split_whitespace().collect::<Vec<_>>().join(" ");
            s = format!("{lead}{inner}{trail}");
        }
        if !self.case_sensitive {
            s = s.to_lowercase();
        }
        s
    }
}

fn leading_ws(s: &str) -> &str {
    &s[..s.len() - s.trim_start().len()]
}

fn trailing_ws(s: &str) -> &str {
    &s[s.trim_end().len()..]
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("empty group")]
    EmptyGroup,
}

pub fn exact_match(answer: &str, y_star: &str, policy: &MatchPolicy) -> bool {
    policy.normalize(answer) == policy.normalize(y_star)
}

/// Fraction of `answers` that exactly match `y_star`.
pub fn group_accuracy<S: AsRef<str>>(
    answers: &[S],
    y_star: &str,
    policy: &MatchPolicy,
) -> Result<f64, RewardError> {
    if answers.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let truth = policy.normalize(y_star);
    let hits = answers.iter().filter(|a| policy.normalize(a.as_ref()) == truth).count();
    Ok(hits as f64 / answers.len() as f64)
}

/// `1(acc > gate_epsilon) * (1 - acc)`.
pub fn constructor_reward(acc: f64, gate_epsilon: f64) -> f64 {
    if acc > gate_epsilon {
        1.0 - acc
    } else {
        0.0
    }
}

/// Difficulty reward with the validity gate removed; only used for ablations.
pub fn ungated_constructor_reward(acc: f64) -> f64 {
    1.0 - acc
}

/// Soft-reward weight from the hidden truth's length. Lengths at or above the
/// threshold count as long.
pub fn lambda1(y_star_token_length: usize, cfg: &LoopConfig) -> f64 {
    if y_star_token_length as i64 >= cfg.lambda1_threshold_tokens {
        cfg.lambda1_long
    } else {
        cfg.lambda1_short
    }
}

pub fn solver_reward(hard: f64, soft: f64, lambda1_value: f64) -> f64 {
    hard + lambda1_value * soft
}

/// Whitespace-delimited units after trimming; a tokenizer-free length.
pub fn token_length(y_star: &str) -> usize {
    y_star.split_whitespace().count()
}
