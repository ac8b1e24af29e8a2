//! One step of the loop: construct, solve, review, score, then either update
//! the toy policy or emit training batches.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::config::{ReviewerSource, RunConfig};
use super::EngineError;
use crate::backend::{BackendError, GenRequest, GenResult, Generator};
use crate::datamodel::{
    count_batch_items, BatchKind, BatchPayload, ConstructedTask, Document, LoopConfig, Review,
    ReviewerKind, RewardKind, RewardRecord, SolverRollout, StepMetrics, TrainingBatchItem,
};
use crate::optim::{
    distill_loss, fcp_loss, grpo_objective, normalize_group, total_objective, AdvantageGroup,
    ObjectiveBreakdown,
};
use crate::promptio::{
    format_sections, parse_constructor, parse_reviewer, parse_solver, Role, Tag, TemplateSet,
};
use crate::reward::{constructor_reward, group_accuracy, lambda1, solver_reward, token_length, ungated_constructor_reward};
use crate::toypolicy::corpus::ToyDocument;
use crate::toypolicy::params::grpo_objective_value;
use crate::toypolicy::{
    apply_distill_update, apply_fcp_update, apply_grpo_update, dims_for, distill_logprobs,
    entropy_estimate, fcp_logprobs, gen_corpus, toy_construct, toy_review, toy_solve, ClipBand,
    CritiqueCategory, DistillSample, FcpSample, PolicySample, ToyParams, ToyRollout, ToyTask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverGroup {
    pub task_id: String,
    pub group: AdvantageGroup,
}

/// Everything one step produced, in the order it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub step: u64,
    pub warmup: bool,
    pub document: Document,
    pub tasks: Vec<ConstructedTask>,
    /// Grouped by task, tasks in order; invalid tasks contribute none.
    pub rollouts: Vec<SolverRollout>,
    /// One per rollout, same order.
    pub reviews: Vec<Review>,
    /// Warm-up only; rollouts whose teacher call failed have no entry.
    pub teacher_reviews: Vec<Review>,
    pub rewards: Vec<RewardRecord>,
    pub constructor_group: AdvantageGroup,
    pub solver_groups: Vec<SolverGroup>,
    /// Invalid tasks whose N solver slots were skipped.
    pub skipped_tasks: Vec<String>,
    pub batch_items: Vec<TrainingBatchItem>,
    pub objective: ObjectiveBreakdown,
    pub metrics: StepMetrics,
}

/// Batch items a step yields given how many of its tasks were valid. Equals
/// [`count_batch_items`] when every task is valid.
pub fn realized_batch_items(m: u64, valid_tasks: u64, n: u64, warmup: bool) -> u64 {
    let rollouts = valid_tasks * n;
    1 + m + if warmup { 2 * rollouts } else { rollouts }
}

impl StepPlan {
    /// Structural invariants of a finished step.
    pub fn check(&self, cfg: &LoopConfig) -> Result<(), String> {
        let m = cfg.m as usize;
        let n = cfg.n as usize;
        if self.tasks.len() != m {
            return Err(format!("expected {m} tasks, found {}", self.tasks.len()));
        }
        if self.constructor_group.rewards.len() != m {
            return Err("constructor group must have M members".into());
        }
        let valid = self.tasks.iter().filter(|t| t.valid).count();
        if self.rollouts.len() != valid * n {
            return Err(format!("expected {} rollouts, found {}", valid * n, self.rollouts.len()));
        }
        if self.solver_groups.len() != valid || self.solver_groups.iter().any(|g| g.group.rewards.len() != n) {
            return Err("solver groups must have N members per valid task".into());
        }
        if self.reviews.len() != self.rollouts.len()
            || self.reviews.iter().zip(&self.rollouts).any(|(r, o)| r.rollout_id != o.rollout_id)
        {
            return Err("every rollout needs exactly one review".into());
        }
        let expect = realized_batch_items(m as u64, valid as u64, n as u64, self.warmup);
        if self.batch_items.len() as u64 != expect {
            return Err(format!("expected {expect} batch items, found {}", self.batch_items.len()));
        }
        if valid == m && expect != count_batch_items(m as u64, n as u64, self.warmup) {
            return Err("batch accounting mismatch".into());
        }
        Ok(())
    }
}

/// Rewards and advantages for one step's tasks and rollouts.
struct Scored {
    rewards: Vec<RewardRecord>,
    constructor_rewards: Vec<f64>,
    accuracies: Vec<Option<f64>>,
    constructor_group: AdvantageGroup,
    solver_groups: Vec<SolverGroup>,
}

/// `rollouts[i]` and `soft[i]` are empty for invalid tasks.
fn score(
    cfg: &LoopConfig,
    tasks: &[ConstructedTask],
    rollouts: &[Vec<SolverRollout>],
    soft: &[Vec<f64>],
) -> Result<Scored, EngineError> {
    let mut rewards = Vec::new();
    let mut constructor_rewards = Vec::with_capacity(tasks.len());
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut solver_totals = Vec::new();
    for ((task, group), scores) in tasks.iter().zip(rollouts).zip(soft) {
        if !task.valid {
            constructor_rewards.push(0.0);
            accuracies.push(None);
            rewards.push(RewardRecord {
                subject: task.task_id.clone(),
                kind: RewardKind::Constructor,
                value: 0.0,
                lambda1_used: None,
            });
            continue;
        }
        let answers: Vec<&str> = group.iter().map(|r| r.answer.as_str()).collect();
        let acc = group_accuracy(&answers, &task.hidden_truth, &cfg.match_policy)
            .map_err(|e| EngineError::Internal(e.to_string()))?;
        let r_const = if cfg.gate_enabled {
            constructor_reward(acc, cfg.gate_epsilon)
        } else {
            ungated_constructor_reward(acc)
        };
        constructor_rewards.push(r_const);
        accuracies.push(Some(acc));
        rewards.push(RewardRecord {
            subject: task.task_id.clone(),
            kind: RewardKind::Constructor,
            value: r_const,
            lambda1_used: None,
        });
        let l1 = lambda1(token_length(&task.hidden_truth), cfg);
        let truth = cfg.match_policy.normalize(&task.hidden_truth);
        let mut totals = Vec::with_capacity(group.len());
        for (r, &v) in group.iter().zip(scores) {
            let hard = if r.parsed && cfg.match_policy.normalize(&r.answer) == truth { 1.0 } else { 0.0 };
            let total = solver_reward(hard, v, l1);
            for (kind, value, used) in [
                (RewardKind::SolverHard, hard, None),
                (RewardKind::SolverSoft, v, None),
                (RewardKind::SolverTotal, total, Some(l1)),
            ] {
                rewards.push(RewardRecord { subject: r.rollout_id.clone(), kind, value, lambda1_used: used });
            }
            totals.push(total);
        }
        solver_totals.push((task.task_id.clone(), totals));
    }
    let constructor_group = normalize_group(&constructor_rewards, cfg.sigma_floor)?;
    let solver_groups = solver_totals
        .into_iter()
        .map(|(task_id, totals)| Ok(SolverGroup { task_id, group: normalize_group(&totals, cfg.sigma_floor)? }))
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(Scored { rewards, constructor_rewards, accuracies, constructor_group, solver_groups })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn base_metrics(step: u64, warmup: bool, scored: &Scored, tasks: &[ConstructedTask]) -> StepMetrics {
    let valid: Vec<f64> = scored.accuracies.iter().flatten().copied().collect();
    StepMetrics {
        step,
        warmup,
        constructor_reward_mean: mean(scored.constructor_rewards.iter().copied()).unwrap_or(0.0),
        solver_acc_mean: mean(valid.iter().copied()),
        fcp_loss: None,
        entropy_estimate: None,
        valid_task_fraction: valid.len() as f64 / tasks.len() as f64,
        zero_acc_task_fraction: mean(valid.iter().map(|&a| if a == 0.0 { 1.0 } else { 0.0 })),
        distill_loss: None,
        total_objective: 0.0,
        no_valid_tasks: valid.is_empty(),
    }
}

/// Per-rollout text the batch items are built from.
struct RolloutText<'a> {
    rollout: &'a SolverRollout,
    solver_prompt: &'a str,
    completion: &'a str,
    critique: &'a str,
    /// Reviewer prompt and teacher critique (None when the teacher failed).
    distill: Option<(&'a str, Option<&'a str>)>,
}

struct BatchInputs<'a> {
    step: u64,
    document: &'a Document,
    constructor_prompt: &'a str,
    tasks: &'a [ConstructedTask],
    task_completions: &'a [String],
    constructor_group: &'a AdvantageGroup,
    solver_groups: &'a [SolverGroup],
    rollouts: Vec<RolloutText<'a>>,
}

fn build_batch(b: BatchInputs<'_>) -> Vec<TrainingBatchItem> {
    let mut items = Vec::with_capacity(1 + b.tasks.len() + 2 * b.rollouts.len());
    items.push(TrainingBatchItem {
        kind: BatchKind::Document,
        payload: BatchPayload { prompt: b.constructor_prompt.to_string(), target: String::new(), condition: None },
        advantage: None,
        step: b.step,
        subject: b.document.id.clone(),
        logprob_old: None,
        failed: false,
    });
    for ((task, completion), adv) in b.tasks.iter().zip(b.task_completions).zip(&b.constructor_group.advantages) {
        items.push(TrainingBatchItem {
            kind: BatchKind::ConstructorTask,
            payload: BatchPayload {
                prompt: b.constructor_prompt.to_string(),
                target: completion.clone(),
                condition: None,
            },
            advantage: Some(*adv),
            step: b.step,
            subject: task.task_id.clone(),
            logprob_old: task.logprob_old,
            failed: false,
        });
    }
    let advantages = b.solver_groups.iter().flat_map(|g| g.group.advantages.iter().copied());
    let mut distill = Vec::new();
    for (r, adv) in b.rollouts.iter().zip(advantages) {
        items.push(TrainingBatchItem {
            kind: BatchKind::FcpSample,
            payload: BatchPayload {
                prompt: r.solver_prompt.to_string(),
                target: r.completion.to_string(),
                condition: Some(r.critique.to_string()),
            },
            advantage: Some(adv),
            step: b.step,
            subject: r.rollout.rollout_id.clone(),
            logprob_old: r.rollout.logprob_old,
            failed: false,
        });
        if let Some((prompt, teacher)) = r.distill {
            distill.push(TrainingBatchItem {
                kind: BatchKind::DistillSample,
                payload: BatchPayload {
                    prompt: prompt.to_string(),
                    target: teacher.unwrap_or_default().to_string(),
                    condition: None,
                },
                advantage: None,
                step: b.step,
                subject: r.rollout.rollout_id.clone(),
                logprob_old: None,
                failed: teacher.is_none(),
            });
        }
    }
    items.extend(distill);
    items
}

/// Per-step sampling stream: independent of earlier steps, so a resumed run
/// draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

// ---------------------------------------------------------------------------
// Toy mode
// ---------------------------------------------------------------------------

pub struct ToyState {
    pub corpus: Vec<ToyDocument>,
    pub params: ToyParams,
    /// KL anchor: the parameters before the first update.
    pub reference: ToyParams,
}

impl ToyState {
    pub fn new(cfg: &RunConfig) -> Self {
        let corpus = gen_corpus(&cfg.toy.spec, cfg.toy.corpus_size);
        let params = ToyParams::zeros(dims_for(&cfg.toy.spec));
        Self { corpus, reference: params.clone(), params }
    }
}

fn toy_err(e: crate::toypolicy::ToyError) -> EngineError {
    EngineError::Toy(e)
}

pub(super) fn toy_step(
    cfg: &RunConfig,
    templates: &TemplateSet,
    state: &mut ToyState,
    step: u64,
    warmup: bool,
) -> Result<StepPlan, EngineError> {
    let lc = &cfg.loop_cfg;
    let doc = &state.corpus[((step - 1) % state.corpus.len() as u64) as usize];
    let document = doc.to_document(cfg.toy.spec.seed);
    let mut rng = step_rng(lc.seed, step);
    let params = &state.params;
    let vocab = cfg.toy.spec.vocab_size;

    let toy_tasks: Vec<ToyTask> =
        toy_construct(params, doc, lc.m, &format!("s{step}"), &mut rng).map_err(toy_err)?;
    let toy_rollouts: Vec<Vec<ToyRollout>> =
        toy_tasks.iter().map(|t| toy_solve(params, doc, t, lc.n, &mut rng)).collect();
    let tasks: Vec<ConstructedTask> = toy_tasks.iter().map(|t| t.task.clone()).collect();
    let rollouts: Vec<Vec<SolverRollout>> =
        toy_rollouts.iter().map(|g| g.iter().map(|r| r.rollout.clone()).collect()).collect();
    let reviews: Vec<Vec<_>> = toy_tasks
        .iter()
        .zip(&rollouts)
        .map(|(t, g)| g.iter().map(|r| toy_review(t.truth, r, vocab, ReviewerKind::SelfReview)).collect::<Vec<_>>())
        .collect();
    let teacher: Vec<Vec<_>> = if warmup {
        toy_tasks
            .iter()
            .zip(&rollouts)
            .map(|(t, g)| g.iter().map(|r| toy_review(t.truth, r, vocab, ReviewerKind::Teacher)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let soft: Vec<Vec<f64>> =
        reviews.iter().map(|g| g.iter().map(|r| r.review.soft_score).collect()).collect();
    let scored = score(lc, &tasks, &rollouts, &soft)?;

    // update inputs
    let band = ClipBand { eps_low: lc.eps_clip_low, eps_high: lc.eps_clip_high };
    let constructor_samples: Vec<PolicySample> = toy_tasks
        .iter()
        .zip(&scored.constructor_group.advantages)
        .map(|(t, &a)| PolicySample {
            decision: t.decision.clone(),
            advantage: a,
            logprob_old: t.task.logprob_old.unwrap_or(0.0),
        })
        .collect();
    let solver_samples: Vec<Vec<PolicySample>> = toy_rollouts
        .iter()
        .zip(&scored.solver_groups)
        .map(|(g, sg)| {
            g.iter()
                .zip(&sg.group.advantages)
                .map(|(r, &a)| PolicySample {
                    decision: r.decision.clone(),
                    advantage: a,
                    logprob_old: r.rollout.logprob_old.unwrap_or(0.0),
                })
                .collect()
        })
        .collect();
    let mut fcp_samples = Vec::new();
    let mut distill_samples = Vec::new();
    for (i, t) in toy_tasks.iter().enumerate() {
        for (j, r) in toy_rollouts[i].iter().enumerate() {
            let category = reviews[i][j].category;
            let weight = if category == CritiqueCategory::Exact { 1.0 } else { lc.fcp_negative_weight };
            fcp_samples.push(FcpSample { context: t.context, category, answer: r.answer, weight });
            if warmup {
                distill_samples.push(DistillSample { context: t.context, answer: r.answer, teacher: teacher[i][j].category });
            }
        }
    }

    // objective and metrics at the sampling parameters
    let j_const = grpo_objective_value(params, std::slice::from_ref(&constructor_samples), band, lc.alpha_kl, &state.reference);
    let j_solver = grpo_objective_value(params, &solver_samples, band, lc.beta_kl, &state.reference);
    let l_fcp = fcp_loss(&fcp_logprobs(params, &fcp_samples))?;
    let l_distill = if warmup { distill_loss(&distill_logprobs(params, &distill_samples))? } else { 0.0 };
    let objective = total_objective(j_const, j_solver, l_fcp, l_distill, step, lc);
    let contexts: Vec<usize> = toy_tasks.iter().map(|t| t.context).collect();
    let mut metrics = base_metrics(step, warmup, &scored, &tasks);
    metrics.fcp_loss = Some(l_fcp);
    metrics.entropy_estimate = Some(entropy_estimate(params, &contexts).map_err(toy_err)?);
    metrics.distill_loss = warmup.then_some(l_distill);
    metrics.total_objective = objective.total;

    // updates go to a copy that replaces the live parameters only on success
    let mut next = params.clone();
    apply_grpo_update(&mut next, &[constructor_samples], band, cfg.toy.lr_constructor, lc.alpha_kl, &state.reference)
        .map_err(toy_err)?;
    apply_grpo_update(&mut next, &solver_samples, band, cfg.toy.lr_solver, lc.beta_kl, &state.reference)
        .map_err(toy_err)?;
    apply_fcp_update(&mut next, &fcp_samples, cfg.toy.lr_fcp * lc.lambda2).map_err(toy_err)?;
    if warmup {
        let l3 = objective.lambda3;
        apply_distill_update(&mut next, &distill_samples, cfg.toy.lr_fcp * l3).map_err(toy_err)?;
    }

    // batch payloads
    let constructor_prompt = templates.constructor_prompt(&document.text)?;
    let task_completions: Vec<String> = tasks
        .iter()
        .map(|t| {
            format_sections(&[(Tag::Thought, &t.thought), (Tag::Task, &t.query), (Tag::HiddenTruth, &t.hidden_truth)])
        })
        .collect();
    let solver_prompts: Vec<String> =
        tasks.iter().map(|t| templates.solver_prompt(&t.query)).collect::<Result<_, _>>()?;
    let completions: Vec<Vec<String>> = rollouts
        .iter()
        .map(|g| g.iter().map(|r| format_sections(&[(Tag::Reasoning, &r.reasoning), (Tag::Answer, &r.answer)])).collect())
        .collect();
    let reviewer_prompts: Vec<Vec<String>> = if warmup {
        tasks
            .iter()
            .zip(&completions)
            .map(|(t, g)| g.iter().map(|c| templates.reviewer_prompt(&t.query, c, &t.hidden_truth)).collect())
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut texts = Vec::new();
    for i in 0..tasks.len() {
        for (j, r) in rollouts[i].iter().enumerate() {
            texts.push(RolloutText {
                rollout: r,
                solver_prompt: &solver_prompts[i],
                completion: &completions[i][j],
                critique: &reviews[i][j].review.critique,
                distill: warmup.then(|| (reviewer_prompts[i][j].as_str(), Some(teacher[i][j].review.critique.as_str()))),
            });
        }
    }
    let batch_items = build_batch(BatchInputs {
        step,
        document: &document,
        constructor_prompt: &constructor_prompt,
        tasks: &tasks,
        task_completions: &task_completions,
        constructor_group: &scored.constructor_group,
        solver_groups: &scored.solver_groups,
        rollouts: texts,
    });

    state.params = next;
    Ok(StepPlan {
        step,
        warmup,
        document,
        tasks,
        rollouts: rollouts.into_iter().flatten().collect(),
        reviews: reviews.into_iter().flatten().map(|r| r.review).collect(),
        teacher_reviews: teacher.into_iter().flatten().map(|r| r.review).collect(),
        rewards: scored.rewards,
        constructor_group: scored.constructor_group,
        solver_groups: scored.solver_groups,
        skipped_tasks: Vec::new(),
        batch_items,
        objective,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Remote mode
// ---------------------------------------------------------------------------

pub struct RemoteState {
    pub corpus: Vec<Document>,
    pub policy: Arc<dyn Generator>,
    /// Teacher for warm-up distillation and, with `reviewer_source = oracle`,
    /// the reviewer.
    pub oracle: Option<Arc<dyn Generator>>,
}

fn fault(phase: &'static str) -> impl Fn(BackendError) -> EngineError {
    move |source| EngineError::Backend { phase, source }
}

fn expect_count(res: &GenResult, n: u32, phase: &'static str) -> Result<(), EngineError> {
    if res.completions.len() != n as usize {
        return Err(EngineError::Backend {
            phase,
            source: BackendError::ShortCompletionSet { wanted: n, got: res.completions.len() as u32 },
        });
    }
    Ok(())
}

fn unparsed_review(rollout_id: &str, reason: String, kind: ReviewerKind) -> Review {
    Review {
        rollout_id: rollout_id.to_string(),
        analysis: reason,
        critique: "The review could not be parsed.".into(),
        soft_score: 0.0,
        reviewer_kind: kind,
        clamped: false,
    }
}

/// Averages the parsed scores of `k` review samples; the critique and
/// analysis come from the first sample that parsed.
fn review_from(rollout_id: &str, completions: &[String], kind: ReviewerKind) -> (Review, bool) {
    let parsed: Vec<_> = completions.iter().map(|c| parse_reviewer(c)).collect();
    let ok: Vec<_> = parsed.iter().filter_map(|p| p.as_ref().ok()).collect();
    match ok.first() {
        None => {
            let reason = match parsed.first() {
                Some(Err(e)) => format!("missing or malformed {e}"),
                _ => "no review sample".into(),
            };
            (unparsed_review(rollout_id, reason, kind), false)
        }
        Some(first) => {
            let soft = ok.iter().map(|p| p.soft_score).sum::<f64>() / ok.len() as f64;
            let review = Review {
                rollout_id: rollout_id.to_string(),
                analysis: first.analysis.clone(),
                critique: first.critique.clone(),
                soft_score: soft,
                reviewer_kind: kind,
                clamped: ok.iter().any(|p| p.clamped),
            };
            (review, true)
        }
    }
}

fn request(role: Role, prompt: String, n: u32, cfg: &RunConfig, tag: String) -> GenRequest {
    GenRequest {
        role,
        prompt,
        n,
        temperature: cfg.loop_cfg.temperature,
        max_tokens: cfg.backend.max_tokens.for_role(role),
        tag,
    }
}

pub(super) fn remote_step(
    cfg: &RunConfig,
    templates: &TemplateSet,
    state: &RemoteState,
    step: u64,
    warmup: bool,
) -> Result<StepPlan, EngineError> {
    let lc = &cfg.loop_cfg;
    let document = state.corpus[((step - 1) % state.corpus.len() as u64) as usize].clone();

    // Phase I: M constructions from one call
    let constructor_prompt = templates.constructor_prompt(&document.text)?;
    let res = state
        .policy
        .generate(&request(Role::Constructor, constructor_prompt.clone(), lc.m, cfg, format!("s{step}-construct")))
        .map_err(fault("construct"))?;
    expect_count(&res, lc.m, "construct")?;
    let tasks: Vec<ConstructedTask> = res
        .completions
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let task_id = format!("s{step}-t{i}");
            let logprob_old = res.logprobs.as_ref().and_then(|l| l.get(i)).map(|v| v.min(0.0));
            match parse_constructor(text) {
                Ok(p) => ConstructedTask {
                    task_id,
                    document_id: document.id.clone(),
                    query: p.query,
                    hidden_truth: p.hidden_truth,
                    thought: p.thought,
                    rollout_index: i as u32,
                    valid: p.valid,
                    invalid_reason: p.invalid_reason,
                    logprob_old,
                },
                Err(e) => ConstructedTask {
                    task_id,
                    document_id: document.id.clone(),
                    query: String::new(),
                    hidden_truth: String::new(),
                    thought: String::new(),
                    rollout_index: i as u32,
                    valid: false,
                    invalid_reason: Some(format!("missing or malformed {e}")),
                    logprob_old,
                },
            }
        })
        .collect();
    let skipped_tasks: Vec<String> = tasks.iter().filter(|t| !t.valid).map(|t| t.task_id.clone()).collect();
    if skipped_tasks.len() == tasks.len() {
        warn!(step, "no valid tasks; solver phase is empty");
    }

    // Phase II: N solutions per valid task, fanned out
    let valid_idx: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].valid).collect();
    let solver_prompts: Vec<String> =
        valid_idx.iter().map(|&i| templates.solver_prompt(&tasks[i].query)).collect::<Result<_, _>>()?;
    let reqs: Vec<GenRequest> = valid_idx
        .iter()
        .zip(&solver_prompts)
        .map(|(&i, p)| request(Role::Solver, p.clone(), lc.n, cfg, tasks[i].task_id.clone()))
        .collect();
    let mut rollouts: Vec<Vec<SolverRollout>> = vec![Vec::new(); tasks.len()];
    let mut completions: Vec<Vec<String>> = vec![Vec::new(); tasks.len()];
    for (&i, r) in valid_idx.iter().zip(state.policy.generate_group(&reqs)) {
        let r = r.map_err(fault("solve"))?;
        expect_count(&r, lc.n, "solve")?;
        for (j, text) in r.completions.iter().enumerate() {
            let (reasoning, answer, parsed) = match parse_solver(text) {
                Ok((reasoning, answer)) => (reasoning, answer, true),
                Err(_) => (String::new(), String::new(), false),
            };
            rollouts[i].push(SolverRollout {
                rollout_id: format!("{}-r{j}", tasks[i].task_id),
                task_id: tasks[i].task_id.clone(),
                reasoning,
                answer,
                sample_index: j as u32,
                logprob_old: r.logprobs.as_ref().and_then(|l| l.get(j)).map(|v| v.min(0.0)),
                parsed,
            });
        }
        completions[i] = r.completions;
    }

    // Phase III: one review per rollout, plus teacher critiques in warm-up
    let mut reviewer_prompts = Vec::new();
    let mut review_reqs = Vec::new();
    for &i in &valid_idx {
        for (r, c) in rollouts[i].iter().zip(&completions[i]) {
            let p = templates.reviewer_prompt(&tasks[i].query, c, &tasks[i].hidden_truth)?;
            review_reqs.push(request(Role::Reviewer, p.clone(), lc.review_samples, cfg, r.rollout_id.clone()));
            reviewer_prompts.push(p);
        }
    }
    let (reviewer, kind): (&Arc<dyn Generator>, _) = match cfg.reviewer_source {
        ReviewerSource::SelfReview => (&state.policy, ReviewerKind::SelfReview),
        ReviewerSource::Oracle => (state.oracle.as_ref().ok_or(EngineError::NoOracle)?, ReviewerKind::Teacher),
    };
    let mut reviews = Vec::with_capacity(review_reqs.len());
    for (req, r) in review_reqs.iter().zip(reviewer.generate_group(&review_reqs)) {
        let r = r.map_err(fault("review"))?;
        reviews.push(review_from(&req.tag, &r.completions, kind).0);
    }
    let mut teacher: Vec<Option<Review>> = Vec::new();
    if warmup {
        let oracle = state.oracle.as_ref().ok_or(EngineError::NoOracle)?;
        let reqs: Vec<GenRequest> =
            review_reqs.iter().map(|r| GenRequest { n: 1, tag: format!("{}-teacher", r.tag), ..r.clone() }).collect();
        for (req, r) in review_reqs.iter().zip(oracle.generate_group(&reqs)) {
            teacher.push(match r {
                Ok(res) => match review_from(&req.tag, &res.completions, ReviewerKind::Teacher) {
                    (review, true) => Some(review),
                    (_, false) => {
                        warn!(step, rollout = %req.tag, "teacher critique unparseable; distill sample marked failed");
                        None
                    }
                },
                Err(e) => {
                    warn!(step, rollout = %req.tag, error = %e, "teacher call failed; distill sample marked failed");
                    None
                }
            });
        }
    }

    let soft: Vec<Vec<f64>> = {
        let mut it = reviews.iter();
        rollouts.iter().map(|g| g.iter().map(|_| it.next().expect("one review per rollout").soft_score).collect()).collect()
    };
    let scored = score(lc, &tasks, &rollouts, &soft)?;

    // Phase IV: no parameter access; report the surrogate at ρ = 1
    let band = (lc.eps_clip_low, lc.eps_clip_high);
    let terms = |g: &AdvantageGroup| g.advantages.iter().map(|&a| (1.0, a)).collect::<Vec<_>>();
    let j_const = grpo_objective(&terms(&scored.constructor_group), band.0, band.1, 0.0, 0.0);
    let j_solver = mean(scored.solver_groups.iter().map(|g| grpo_objective(&terms(&g.group), band.0, band.1, 0.0, 0.0)))
        .unwrap_or(0.0);
    let objective = total_objective(j_const, j_solver, 0.0, 0.0, step, lc);
    let mut metrics = base_metrics(step, warmup, &scored, &tasks);
    metrics.total_objective = objective.total;

    let task_completions = res.completions.clone();
    let flat_completions: Vec<&String> = valid_idx.iter().flat_map(|&i| completions[i].iter()).collect();
    let flat_prompts: Vec<&String> =
        valid_idx.iter().zip(&solver_prompts).flat_map(|(&i, p)| std::iter::repeat_n(p, rollouts[i].len())).collect();
    let flat_rollouts: Vec<SolverRollout> = rollouts.into_iter().flatten().collect();
    let texts: Vec<RolloutText<'_>> = flat_rollouts
        .iter()
        .enumerate()
        .map(|(k, r)| RolloutText {
            rollout: r,
            solver_prompt: flat_prompts[k],
            completion: flat_completions[k],
            critique: &reviews[k].critique,
            distill: warmup.then(|| (reviewer_prompts[k].as_str(), teacher[k].as_ref().map(|t| t.critique.as_str()))),
        })
        .collect();
    let batch_items = build_batch(BatchInputs {
        step,
        document: &document,
        constructor_prompt: &constructor_prompt,
        tasks: &tasks,
        task_completions: &task_completions,
        constructor_group: &scored.constructor_group,
        solver_groups: &scored.solver_groups,
        rollouts: texts,
    });

    Ok(StepPlan {
        step,
        warmup,
        document,
        tasks,
        rollouts: flat_rollouts,
        reviews,
        teacher_reviews: teacher.into_iter().flatten().collect(),
        rewards: scored.rewards,
        constructor_group: scored.constructor_group,
        solver_groups: scored.solver_groups,
        skipped_tasks,
        batch_items,
        objective,
        metrics,
    })
}
