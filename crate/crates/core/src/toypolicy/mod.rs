//! A tabular softmax policy playing all three roles over the synthetic
//! modular-arithmetic corpus, with a deterministic distance-based reviewer.
//!
//! * Constructor: picks one maskable position per task; scores come from a
//!   table indexed by the masked equation's content (operator, slot, the two
//!   operands left visible), so it can single out spans the solver fails on.
//! * Solver: picks an answer token from a row indexed by the masked
//!   position's context (operator, slot, the two visible operands).
//! * FCP head: a row per (context, critique category) over answer tokens.
//!   Read column-wise for a fixed answer it also scores critique categories,
//!   which is what warm-up distillation trains.

pub mod corpus;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ConstructedTask, Review, ReviewerKind, SolverRollout};
use corpus::{Equation, Slot, ToyDocument};
pub use corpus::{gen_corpus, ToyCorpusSpec};
pub use params::{
    ClipBand, Decision, Entry, Gradient, PolicySample, Table, ToyDims, ToyParams, WeightedDecision,
};
use params::{entropy, grpo_gradient, logprob, nll_gradient, nll_value, CATEGORIES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("non-finite gradient; parameters left unchanged")]
    NonFiniteGradient,
    #[error("update broke probability conservation (error {0:e}); parameters left unchanged")]
    MassViolation(f64),
    #[error("empty sample set")]
    EmptySamples,
    #[error("document {0} has no maskable position")]
    NothingToMask(String),
}

pub fn dims_for(spec: &ToyCorpusSpec) -> ToyDims {
    let m = spec.modulus as usize;
    ToyDims { vocab: spec.vocab_size as usize, contexts: 9 * m * m, position_features: 9 * m * m }
}

/// Solver context of masking `slot` in `eq`.
pub fn context_index(eq: &Equation, slot: Slot, modulus: u32) -> usize {
    let m = modulus as usize;
    let (v1, v2) = eq.visible(slot);
    ((eq.op.index() * 3 + slot.index()) * m + v1 as usize) * m + v2 as usize
}

/// Constructor feature of masking `slot` in `eq`; the same key as the
/// solver context.
pub fn position_feature(eq: &Equation, slot: Slot, modulus: u32) -> usize {
    context_index(eq, slot, modulus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritiqueCategory {
    Exact,
    NearMiss,
    FarMiss,
}

impl CritiqueCategory {
    pub const ALL: [CritiqueCategory; 3] =
        [CritiqueCategory::Exact, CritiqueCategory::NearMiss, CritiqueCategory::FarMiss];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_distance(d: u32) -> Self {
        match d {
            0 => CritiqueCategory::Exact,
            1 | 2 => CritiqueCategory::NearMiss,
            _ => CritiqueCategory::FarMiss,
        }
    }

    pub fn template_text(self) -> &'static str {
        match self {
            CritiqueCategory::Exact => "The answer matches the masked value; the equation was inverted correctly.",
            CritiqueCategory::NearMiss => "The answer is close to the masked value; one arithmetic step is slightly off.",
            CritiqueCategory::FarMiss => "The answer is far from the masked value; the equation was not inverted correctly.",
        }
    }

    pub fn from_text(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.template_text() == text.trim())
    }
}

pub fn circular_distance(a: u32, b: u32, vocab: u32) -> u32 {
    let d = (a as i64 - b as i64).rem_euclid(vocab as i64) as u32;
    d.min(vocab - d)
}

/// A constructed toy task together with what the updates need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub task: ConstructedTask,
    pub position: usize,
    pub context: usize,
    pub truth: u32,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRollout {
    pub rollout: SolverRollout,
    pub answer: u32,
    pub decision: Decision,
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `m` masking choices over the document's maskable positions.
pub fn toy_construct<R: Rng>(
    params: &ToyParams,
    doc: &ToyDocument,
    m: u32,
    id_prefix: &str,
    rng: &mut R,
) -> Result<Vec<ToyTask>, ToyError> {
    if doc.maskable_positions.is_empty() {
        return Err(ToyError::NothingToMask(doc.id.clone()));
    }
    let candidates: Vec<Entry> = doc
        .maskable_positions
        .iter()
        .map(|&p| {
            let (eq, slot) = doc.locate(p);
            Entry::new(Table::Constructor, position_feature(&eq, slot, doc.modulus))
        })
        .collect();
    let probs = params.probs(&candidates);
    Ok((0..m)
        .map(|i| {
            let chosen = sample_index(&probs, rng);
            let decision = Decision { candidates: candidates.clone(), chosen };
            let lp = logprob(params, &decision);
            let position = doc.maskable_positions[chosen];
            let (eq, slot) = doc.locate(position);
            let truth = doc.tokens[position];
            let task = ConstructedTask {
                task_id: format!("{id_prefix}-t{i}"),
                document_id: doc.id.clone(),
                query: doc.render_masked(position),
                hidden_truth: truth.to_string(),
                thought: format!("mask operand {:?} of equation {}", slot, position / corpus::STRIDE + 1),
                rollout_index: i,
                valid: true,
                invalid_reason: None,
                logprob_old: Some(lp),
            };
            ToyTask { task, position, context: context_index(&eq, slot, doc.modulus), truth, decision }
        })
        .collect())
}

fn reasoning_trace(doc_modulus: u32, eq: &Equation, slot: Slot, answer: u32) -> String {
    let show = |s: Slot| if s == slot { "x".to_string() } else { eq.get(s).to_string() };
    format!(
        "{} {} {} = {} (mod {}), so x = {}",
        show(Slot::A),
        eq.op.symbol(),
        show(Slot::B),
        show(Slot::C),
        doc_modulus,
        answer
    )
}

/// Samples `n` answers for a task from the solver row of its context.
pub fn toy_solve<R: Rng>(
    params: &ToyParams,
    doc: &ToyDocument,
    task: &ToyTask,
    n: u32,
    rng: &mut R,
) -> Vec<ToyRollout> {
    let candidates = params.solver_row(task.context);
    let probs = params.probs(&candidates);
    let (eq, slot) = doc.locate(task.position);
    (0..n)
        .map(|j| {
            let chosen = sample_index(&probs, rng);
            let decision = Decision { candidates: candidates.clone(), chosen };
            let lp = logprob(params, &decision);
            let answer = chosen as u32;
            let rollout = SolverRollout {
                rollout_id: format!("{}-r{j}", task.task.task_id),
                task_id: task.task.task_id.clone(),
                reasoning: reasoning_trace(doc.modulus, &eq, slot, answer),
                answer: answer.to_string(),
                sample_index: j,
                logprob_old: Some(lp),
                parsed: true,
            };
            ToyRollout { rollout, answer, decision }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReview {
    pub review: Review,
    pub category: CritiqueCategory,
}

/// `v = 1 − d/⌊V/2⌋` with `d` the circular distance between answer and truth.
pub fn toy_review(truth: u32, rollout: &SolverRollout, vocab: u32, kind: ReviewerKind) -> ToyReview {
    let parsed = rollout.answer.trim().parse::<u32>().ok().filter(|a| *a < vocab);
    let (soft_score, category, analysis) = match parsed {
        Some(a) => {
            let d = circular_distance(a, truth, vocab);
            let v = 1.0 - d as f64 / (vocab / 2) as f64;
            (v.max(0.0), CritiqueCategory::from_distance(d), format!("answer {a}, circular distance {d}"))
        }
        None => (0.0, CritiqueCategory::FarMiss, "answer is not a token".to_string()),
    };
    let review = Review {
        rollout_id: rollout.rollout_id.clone(),
        analysis,
        critique: category.template_text().to_string(),
        soft_score,
        reviewer_kind: kind,
        clamped: false,
    };
    ToyReview { review, category }
}

fn step_params(params: &mut ToyParams, grad: &Gradient, lr: f64) -> Result<(), ToyError> {
    if !grad.all_finite() {
        return Err(ToyError::NonFiniteGradient);
    }
    let before = params.clone();
    for t in [Table::Constructor, Table::Solver, Table::Fcp] {
        for (p, g) in params.table_mut(t).iter_mut().zip(grad.table(t)) {
            *p += lr * g;
        }
    }
    let err = params.max_row_mass_error();
    if !params.all_finite() || !(err <= 1e-12) {
        *params = before;
        return Err(ToyError::MassViolation(err));
    }
    Ok(())
}

/// One ascent step on the clipped group-relative surrogate.
pub fn apply_grpo_update(
    params: &mut ToyParams,
    groups: &[Vec<PolicySample>],
    band: ClipBand,
    learning_rate: f64,
    kl_coeff: f64,
    reference: &ToyParams,
) -> Result<(), ToyError> {
    let grad = grpo_gradient(params, groups, band, kl_coeff, reference);
    step_params(params, &grad, learning_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcpSample {
    pub context: usize,
    pub category: CritiqueCategory,
    pub answer: u32,
    pub weight: f64,
}

pub fn fcp_decisions(params: &ToyParams, samples: &[FcpSample]) -> Vec<WeightedDecision> {
    samples
        .iter()
        .map(|s| WeightedDecision {
            decision: Decision {
                candidates: params.fcp_row(s.context, s.category.index()),
                chosen: s.answer as usize,
            },
            weight: s.weight,
        })
        .collect()
}

/// Mean NLL of answers given (context, critique) under the FCP table.
pub fn fcp_nll(params: &ToyParams, samples: &[FcpSample]) -> f64 {
    nll_value(params, &fcp_decisions(params, samples))
}

/// Per-sample `log π(answer | context, critique)`.
pub fn fcp_logprobs(params: &ToyParams, samples: &[FcpSample]) -> Vec<f64> {
    fcp_decisions(params, samples).iter().map(|w| logprob(params, &w.decision)).collect()
}

/// One descent step on the FCP negative log-likelihood; returns the new NLL.
pub fn apply_fcp_update(
    params: &mut ToyParams,
    samples: &[FcpSample],
    learning_rate: f64,
) -> Result<f64, ToyError> {
    if samples.is_empty() {
        return Err(ToyError::EmptySamples);
    }
    let decisions = fcp_decisions(params, samples);
    let grad = nll_gradient(params, &decisions);
    step_params(params, &grad, -learning_rate)?;
    Ok(nll_value(params, &decisions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillSample {
    pub context: usize,
    pub answer: u32,
    pub teacher: CritiqueCategory,
}

pub fn distill_decisions(params: &ToyParams, samples: &[DistillSample]) -> Vec<WeightedDecision> {
    samples
        .iter()
        .map(|s| WeightedDecision {
            decision: Decision {
                candidates: params.critique_head(s.context, s.answer as usize),
                chosen: s.teacher.index(),
            },
            weight: 1.0,
        })
        .collect()
}

pub fn distill_logprobs(params: &ToyParams, samples: &[DistillSample]) -> Vec<f64> {
    distill_decisions(params, samples).iter().map(|w| logprob(params, &w.decision)).collect()
}

/// One descent step on the teacher-critique NLL under the critique head.
pub fn apply_distill_update(
    params: &mut ToyParams,
    samples: &[DistillSample],
    learning_rate: f64,
) -> Result<f64, ToyError> {
    if samples.is_empty() {
        return Err(ToyError::EmptySamples);
    }
    let decisions = distill_decisions(params, samples);
    let grad = nll_gradient(params, &decisions);
    step_params(params, &grad, -learning_rate)?;
    Ok(nll_value(params, &decisions))
}

/// Mean Shannon entropy (nats) of the solver's answer distributions.
pub fn entropy_estimate(params: &ToyParams, contexts: &[usize]) -> Result<f64, ToyError> {
    if contexts.is_empty() {
        return Err(ToyError::EmptySamples);
    }
    let total: f64 = contexts.iter().map(|&c| entropy(&params.probs(&params.solver_row(c)))).sum();
    Ok(total / contexts.len() as f64)
}

/// Checks `CATEGORIES` matches the category enum.
const _: () = assert!(CATEGORIES == CritiqueCategory::ALL.len());

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::normalize_group;
    use params::grpo_objective_value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ToyCorpusSpec {
        ToyCorpusSpec::default()
    }

    fn fresh() -> ToyParams {
        ToyParams::zeros(dims_for(&spec()))
    }

    fn band() -> ClipBand {
        ClipBand { eps_low: 0.2, eps_high: 0.28 }
    }

    fn doc_with_positions(min: usize) -> ToyDocument {
        gen_corpus(&spec(), 200).into_iter().find(|d| d.maskable_positions.len() >= min).unwrap()
    }

    /// Three-sigma binomial band around `p` for `n` draws.
    fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - n as f64 * p).abs() <= 3.0 * sigma
    }

    #[test]
    fn uniform_constructor_picks_evenly() {
        // a document whose maskable positions fall into two distinct features
        let mut doc = doc_with_positions(2);
        let feats: Vec<usize> = doc
            .maskable_positions
            .iter()
            .map(|&p| {
                let (e, s) = doc.locate(p);
                position_feature(&e, s, doc.modulus)
            })
            .collect();
        let first = doc.maskable_positions[0];
        let other = doc.maskable_positions[feats.iter().position(|f| *f != feats[0]).unwrap()];
        doc.maskable_positions = vec![first, other];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let tasks = toy_construct(&fresh(), &doc, n, "s1", &mut rng).unwrap();
        let hits = tasks.iter().filter(|t| t.position == first).count();
        assert!(within_3_sigma(hits, n as usize, 0.5), "{hits}");
    }

    #[test]
    fn single_position_has_zero_logprob() {
        let mut doc = doc_with_positions(1);
        doc.maskable_positions.truncate(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tasks = toy_construct(&fresh(), &doc, 5, "s1", &mut rng).unwrap();
        for t in tasks {
            assert_eq!(t.position, doc.maskable_positions[0]);
            assert_eq!(t.task.logprob_old, Some(0.0));
        }
    }

    #[test]
    fn strong_constructor_logits_dominate() {
        let mut doc = doc_with_positions(2);
        let feat = |d: &ToyDocument, p: usize| {
            let (e, s) = d.locate(p);
            position_feature(&e, s, d.modulus)
        };
        let first = doc.maskable_positions[0];
        let second = *doc.maskable_positions.iter().find(|&&p| feat(&doc, p) != feat(&doc, first)).unwrap();
        doc.maskable_positions = vec![first, second];
        let mut params = fresh();
        params.constructor_logits[feat(&doc, first)] = 10.0;
        params.constructor_logits[feat(&doc, second)] = -10.0;
        let d = Decision {
            candidates: vec![
                Entry::new(Table::Constructor, feat(&doc, first)),
                Entry::new(Table::Constructor, feat(&doc, second)),
            ],
            chosen: 0,
        };
        assert!(logprob(&params, &d).exp() > 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tasks = toy_construct(&params, &doc, 2000, "s1", &mut rng).unwrap();
        assert!(tasks.iter().filter(|t| t.position == first).count() >= 1995);
    }

    #[test]
    fn uniform_solver_frequencies() {
        let doc = doc_with_positions(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let task = toy_construct(&fresh(), &doc, 1, "s1", &mut rng).unwrap().remove(0);
        let n = 20_000;
        let rolls = toy_solve(&fresh(), &doc, &task, n, &mut rng);
        for k in 0..10 {
            let c = rolls.iter().filter(|r| r.answer == k).count();
            assert!(within_3_sigma(c, n as usize, 0.1), "candidate {k}: {c}");
        }
    }

    #[test]
    fn forced_solver_and_counts() {
        let doc = doc_with_positions(1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let task = toy_construct(&fresh(), &doc, 1, "s1", &mut rng).unwrap().remove(0);
        let mut params = fresh();
        params.solver_logits[task.context * 10 + 7] = 60.0;
        let rolls = toy_solve(&params, &doc, &task, 16, &mut rng);
        assert_eq!(rolls.len(), 16);
        assert!(rolls.iter().all(|r| r.rollout.answer == "7"));
        let mut idx: Vec<u32> = rolls.iter().map(|r| r.rollout.sample_index).collect();
        idx.dedup();
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
    }

    fn rollout(answer: &str) -> SolverRollout {
        SolverRollout {
            rollout_id: "r".into(),
            task_id: "t".into(),
            reasoning: String::new(),
            answer: answer.into(),
            sample_index: 0,
            logprob_old: None,
            parsed: true,
        }
    }

    #[test]
    fn review_scores() {
        let r = toy_review(3, &rollout("3"), 10, ReviewerKind::SelfReview);
        assert_eq!((r.review.soft_score, r.category), (1.0, CritiqueCategory::Exact));
        let r = toy_review(3, &rollout("8"), 10, ReviewerKind::SelfReview);
        assert_eq!((r.review.soft_score, r.category), (0.0, CritiqueCategory::FarMiss));
        let r = toy_review(0, &rollout("9"), 10, ReviewerKind::SelfReview);
        assert!((r.review.soft_score - 0.8).abs() < 1e-15);
        assert_eq!(r.category, CritiqueCategory::NearMiss);
        let r = toy_review(0, &rollout("x"), 10, ReviewerKind::Teacher);
        assert_eq!((r.review.soft_score, r.category), (0.0, CritiqueCategory::FarMiss));
        assert_eq!(CritiqueCategory::from_text(r.review.critique.as_str()), Some(CritiqueCategory::FarMiss));
    }

    fn solver_sample(params: &ToyParams, ctx: usize, chosen: usize, adv: f64) -> PolicySample {
        let decision = Decision { candidates: params.solver_row(ctx), chosen };
        PolicySample { logprob_old: logprob(params, &decision), decision, advantage: adv }
    }

    #[test]
    fn zero_advantages_leave_params() {
        let mut p = fresh();
        let before = p.clone();
        let g = vec![vec![solver_sample(&p, 4, 1, 0.0), solver_sample(&p, 4, 2, 0.0)]];
        apply_grpo_update(&mut p, &g, band(), 1.0, 0.0, &before).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut p = fresh();
        let reference = p.clone();
        let s = solver_sample(&p, 4, 3, 1.0);
        let before = logprob(&p, &s.decision);
        apply_grpo_update(&mut p, &[vec![s.clone()]], band(), 0.5, 0.0, &reference).unwrap();
        assert!(logprob(&p, &s.decision) > before);
        // untouched rows stay put
        assert!(p.solver_logits[..40].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipped_ratio_gives_no_gradient() {
        let p = fresh();
        let mut s = solver_sample(&p, 4, 3, 2.0);
        s.logprob_old -= 0.5; // rho = e^0.5 > 1.28
        let g = grpo_gradient(&p, &[vec![s]], band(), 0.0, &p);
        assert!(g.solver.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut p = fresh();
        let reference = p.clone();
        let s = solver_sample(&p, 0, 0, f64::INFINITY);
        assert_eq!(
            apply_grpo_update(&mut p, &[vec![s]], band(), 1.0, 0.0, &reference),
            Err(ToyError::NonFiniteGradient)
        );
        assert_eq!(p, reference);
    }

    #[test]
    fn fcp_descent_is_monotone() {
        let mut p = fresh();
        let samples: Vec<FcpSample> = (0..12)
            .map(|i| FcpSample {
                context: i % 4,
                category: CritiqueCategory::ALL[i % 3],
                answer: (i * 7 % 10) as u32,
                weight: 1.0,
            })
            .collect();
        let mut last = fcp_nll(&p, &samples);
        for _ in 0..100 {
            let nll = apply_fcp_update(&mut p, &samples, 0.1).unwrap();
            assert!(nll <= last + 1e-15);
            last = nll;
        }
    }

    #[test]
    fn fcp_single_sample_converges() {
        let mut p = fresh();
        let s = [FcpSample { context: 17, category: CritiqueCategory::NearMiss, answer: 4, weight: 1.0 }];
        let mut nll = f64::INFINITY;
        for _ in 0..500 {
            nll = apply_fcp_update(&mut p, &s, 5.0).unwrap();
        }
        assert!(nll < 0.01, "{nll}");
        // rows of other contexts and categories are untouched
        let touched = p.fcp_row(17, CritiqueCategory::NearMiss.index());
        for (i, v) in p.fcp_logits.iter().enumerate() {
            if !touched.iter().any(|e| e.index == i) {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(apply_fcp_update(&mut p, &[], 1.0), Err(ToyError::EmptySamples));
    }

    #[test]
    fn entropy_examples() {
        let mut p = fresh();
        assert!((entropy_estimate(&p, &[0]).unwrap() - 10f64.ln()).abs() < 1e-12);
        p.solver_logits[10 + 2] = 1000.0;
        assert!(entropy_estimate(&p, &[1]).unwrap().abs() < 1e-12);
        assert!((entropy_estimate(&p, &[0, 1]).unwrap() - 1.151293).abs() < 1e-6);
        assert!(entropy_estimate(&p, &[]).is_err());
    }

    #[test]
    fn distill_update_targets_teacher_category() {
        let mut p = fresh();
        let s = [DistillSample { context: 3, answer: 5, teacher: CritiqueCategory::NearMiss }];
        let before = -distill_logprobs(&p, &s)[0];
        let after = apply_distill_update(&mut p, &s, 1.0).unwrap();
        assert!(after < before);
        assert!((before - 3f64.ln()).abs() < 1e-12);
    }

    /// Whole-objective gradients against central differences.
    #[test]
    fn objective_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dims = ToyDims { vocab: 5, contexts: 4, position_features: 3 };
        for _ in 0..10 {
            let mut p = ToyParams::zeros(dims);
            for t in [Table::Constructor, Table::Solver, Table::Fcp] {
                for v in p.table_mut(t) {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            let reference = ToyParams::zeros(dims);
            let rewards: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            let adv = normalize_group(&rewards, 1e-8).unwrap().advantages;
            let group: Vec<PolicySample> = adv
                .iter()
                .map(|&a| {
                    let decision = Decision { candidates: p.solver_row(rng.gen_range(0..4)), chosen: rng.gen_range(0..5) };
                    let lp = logprob(&p, &decision) + rng.gen_range(-0.1..0.1);
                    PolicySample { decision, advantage: a, logprob_old: lp }
                })
                .collect();
            let groups = vec![group];
            let g = grpo_gradient(&p, &groups, band(), 0.05, &reference);
            let f = |q: &ToyParams| grpo_objective_value(q, &groups, band(), 0.05, &reference);
            for idx in 0..p.solver_logits.len() {
                let e = Entry::new(Table::Solver, idx);
                let h = 1e-6;
                let mut plus = p.clone();
                *plus.get_mut(e) += h;
                let mut minus = p.clone();
                *minus.get_mut(e) -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = g.get(e);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-4), "{fd} vs {an}");
            }
        }
    }
}
