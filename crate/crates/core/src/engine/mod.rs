//! Loop orchestration: step execution in toy or remote mode, run directories
//! with atomic per-step persistence and resume, batch export and stats.

pub mod config;
pub mod corpus;
pub mod export;
pub mod run;
pub mod stats;
mod step;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, BackendError, Generator};
use crate::datamodel::{Document, StoreError, Violation};
use crate::optim::OptimError;
use crate::promptio::{PromptError, TemplateSet};
use crate::toypolicy::{ToyError, ToyParams};
use config::{ReviewerSource, RunConfig};

pub use run::{run, RunSummary};
pub use step::{realized_batch_items, step_rng, RemoteState, SolverGroup, StepPlan, ToyState};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("invalid run mode: {0}")]
    Mode(Violation),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error("backend fault during {phase}: {source}")]
    Backend { phase: &'static str, source: BackendError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("step {step} is outside the warm-up window (warmup_steps = {warmup_steps})")]
    NotWarmup { step: u64, warmup_steps: u64 },
    #[error("steps are numbered from 1")]
    StepZero,
    #[error("this needs an oracle backend, and none is configured")]
    NoOracle,
    #[error("run state at step {step} is unusable: {message}")]
    Corrupt { step: u64, message: String },
    #[error("step {step} violates a structural invariant: {message}")]
    Invariant { step: u64, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> EngineError {
    let path = path.into();
    move |source| EngineError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Toy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMode {
    pub mode: ModeKind,
    pub reviewer_source: ReviewerSource,
    pub oracle_backend: Option<BackendConfig>,
}

impl RunMode {
    pub fn validate(&self) -> Result<(), Violation> {
        if self.mode == ModeKind::Remote
            && self.reviewer_source == ReviewerSource::Oracle
            && self.oracle_backend.is_none()
        {
            return Err(Violation::new("oracle_backend", "reviewer_source = oracle requires an oracle backend"));
        }
        Ok(())
    }
}

enum State {
    Toy(ToyState),
    Remote(RemoteState),
}

/// A configured loop ready to execute steps.
pub struct Engine {
    cfg: RunConfig,
    templates: TemplateSet,
    state: State,
}

fn check_config(cfg: &RunConfig) -> Result<(), EngineError> {
    let violations = cfg.validate();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(config::ConfigError::Invalid(violations).into())
    }
}

fn load_templates(cfg: &RunConfig) -> Result<TemplateSet, EngineError> {
    Ok(match &cfg.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::default(),
    })
}

impl Engine {
    /// Toy mode: fresh zero-initialized parameters over a generated corpus.
    pub fn toy(cfg: RunConfig) -> Result<Self, EngineError> {
        check_config(&cfg)?;
        let templates = load_templates(&cfg)?;
        let state = State::Toy(ToyState::new(&cfg));
        Ok(Self { cfg, templates, state })
    }

    /// Remote mode. An oracle is required for warm-up steps and for oracle
    /// review.
    pub fn remote(
        cfg: RunConfig,
        corpus: Vec<Document>,
        policy: Arc<dyn Generator>,
        oracle: Option<Arc<dyn Generator>>,
    ) -> Result<Self, EngineError> {
        check_config(&cfg)?;
        if corpus.is_empty() {
            return Err(EngineError::Internal("corpus is empty".into()));
        }
        if oracle.is_none() && (cfg.loop_cfg.warmup_steps > 0 || cfg.reviewer_source == ReviewerSource::Oracle) {
            return Err(EngineError::NoOracle);
        }
        let templates = load_templates(&cfg)?;
        Ok(Self { cfg, templates, state: State::Remote(RemoteState { corpus, policy, oracle }) })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Changes the step budget, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, total: u64) {
        self.cfg.loop_cfg.total_steps = total;
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn is_toy(&self) -> bool {
        matches!(self.state, State::Toy(_))
    }

    pub fn toy_params(&self) -> Option<&ToyParams> {
        match &self.state {
            State::Toy(t) => Some(&t.params),
            State::Remote(_) => None,
        }
    }

    pub fn set_toy_params(&mut self, params: ToyParams) -> Result<(), EngineError> {
        match &mut self.state {
            State::Toy(t) if t.params.dims == params.dims => {
                t.params = params;
                Ok(())
            }
            State::Toy(_) => Err(EngineError::Internal("parameter dimensions do not match the toy spec".into())),
            State::Remote(_) => Err(EngineError::Internal("remote mode has no parameters".into())),
        }
    }

    pub fn health(&self) -> Result<(), EngineError> {
        if let State::Remote(r) = &self.state {
            r.policy.health().map_err(|source| EngineError::Backend { phase: "health", source })?;
            if let Some(o) = &r.oracle {
                o.health().map_err(|source| EngineError::Backend { phase: "health", source })?;
            }
        }
        Ok(())
    }

    fn execute(&mut self, step: u64, warmup: bool) -> Result<StepPlan, EngineError> {
        if step == 0 {
            return Err(EngineError::StepZero);
        }
        let plan = match &mut self.state {
            State::Toy(t) => step::toy_step(&self.cfg, &self.templates, t, step, warmup)?,
            State::Remote(r) => step::remote_step(&self.cfg, &self.templates, r, step, warmup)?,
        };
        plan.check(&self.cfg.loop_cfg).map_err(|message| EngineError::Invariant { step, message })?;
        Ok(plan)
    }

    /// A self-play step: no teacher critiques are collected.
    pub fn run_step(&mut self, step: u64) -> Result<StepPlan, EngineError> {
        self.execute(step, false)
    }

    /// A warm-up step; refused past `warmup_steps`.
    pub fn run_warmup_step(&mut self, step: u64) -> Result<StepPlan, EngineError> {
        let warmup_steps = self.cfg.loop_cfg.warmup_steps;
        if step == 0 || step > warmup_steps {
            return Err(EngineError::NotWarmup { step, warmup_steps });
        }
        self.execute(step, true)
    }

    /// Runs `step` in whichever phase the schedule puts it.
    pub fn step(&mut self, step: u64) -> Result<StepPlan, EngineError> {
        if step >= 1 && step <= self.cfg.loop_cfg.warmup_steps {
            self.run_warmup_step(step)
        } else {
            self.run_step(step)
        }
    }
}
