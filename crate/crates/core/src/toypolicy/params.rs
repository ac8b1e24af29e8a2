//! Logit tables of the toy policy and the log-likelihood machinery shared by
//! all three roles. A [`Decision`] is one categorical draw over a list of
//! table entries; every objective is built from decisions.

use serde::{Deserialize, Serialize};

use crate::optim::{clip_active, clipped_term};

pub const CATEGORIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    Constructor,
    Solver,
    Fcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub table: Table,
    pub index: usize,
}

impl Entry {
    pub fn new(table: Table, index: usize) -> Self {
        Self { table, index }
    }
}

/// A categorical choice among `candidates`, of which `chosen` was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub candidates: Vec<Entry>,
    pub chosen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub vocab: usize,
    pub contexts: usize,
    pub position_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub dims: ToyDims,
    pub constructor_logits: Vec<f64>,
    pub solver_logits: Vec<f64>,
    pub fcp_logits: Vec<f64>,
}

impl ToyParams {
    pub fn zeros(dims: ToyDims) -> Self {
        Self {
            dims,
            constructor_logits: vec![0.0; dims.position_features],
            solver_logits: vec![0.0; dims.contexts * dims.vocab],
            fcp_logits: vec![0.0; dims.contexts * CATEGORIES * dims.vocab],
        }
    }

    pub fn table(&self, t: Table) -> &[f64] {
        match t {
            Table::Constructor => &self.constructor_logits,
            Table::Solver => &self.solver_logits,
            Table::Fcp => &self.fcp_logits,
        }
    }

    pub fn table_mut(&mut self, t: Table) -> &mut [f64] {
        match t {
            Table::Constructor => &mut self.constructor_logits,
            Table::Solver => &mut self.solver_logits,
            Table::Fcp => &mut self.fcp_logits,
        }
    }

    pub fn get(&self, e: Entry) -> f64 {
        self.table(e.table)[e.index]
    }

    pub fn get_mut(&mut self, e: Entry) -> &mut f64 {
        &mut self.table_mut(e.table)[e.index]
    }

    pub fn solver_row(&self, context: usize) -> Vec<Entry> {
        let v = self.dims.vocab;
        (0..v).map(|k| Entry::new(Table::Solver, context * v + k)).collect()
    }

    pub fn fcp_row(&self, context: usize, category: usize) -> Vec<Entry> {
        let v = self.dims.vocab;
        let base = (context * CATEGORIES + category) * v;
        (0..v).map(|k| Entry::new(Table::Fcp, base + k)).collect()
    }

    /// Entries scoring each critique category for a fixed (context, answer).
    pub fn critique_head(&self, context: usize, answer: usize) -> Vec<Entry> {
        let v = self.dims.vocab;
        (0..CATEGORIES)
            .map(|c| Entry::new(Table::Fcp, (context * CATEGORIES + c) * v + answer))
            .collect()
    }

    pub fn probs(&self, candidates: &[Entry]) -> Vec<f64> {
        let z: Vec<f64> = candidates.iter().map(|&e| self.get(e)).collect();
        softmax(&z)
    }

    pub fn all_finite(&self) -> bool {
        [Table::Constructor, Table::Solver, Table::Fcp]
            .iter()
            .all(|&t| self.table(t).iter().all(|v| v.is_finite()))
    }

    /// Largest deviation from 1 of any solver or FCP row's probability mass.
    pub fn max_row_mass_error(&self) -> f64 {
        let v = self.dims.vocab;
        self.solver_logits
            .chunks(v)
            .chain(self.fcp_logits.chunks(v))
            .map(|row| (softmax(row).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn logprob(params: &ToyParams, d: &Decision) -> f64 {
    let z: Vec<f64> = d.candidates.iter().map(|&e| params.get(e)).collect();
    z[d.chosen] - log_sum_exp(&z)
}

/// `(one-hot − softmax)` over the decision's entries; duplicates are listed
/// once per occurrence.
pub fn grad_logprob(params: &ToyParams, d: &Decision) -> Vec<(Entry, f64)> {
    let p = params.probs(&d.candidates);
    d.candidates
        .iter()
        .zip(p)
        .enumerate()
        .map(|(i, (&e, pi))| (e, if i == d.chosen { 1.0 - pi } else { -pi }))
        .collect()
}

/// KL(π(·|decision) ‖ π_ref(·|decision)) over the decision's candidates.
pub fn decision_kl(params: &ToyParams, reference: &ToyParams, d: &Decision) -> f64 {
    let p = params.probs(&d.candidates);
    let q = reference.probs(&d.candidates);
    p.iter().zip(&q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum()
}

fn grad_decision_kl(params: &ToyParams, reference: &ToyParams, d: &Decision) -> Vec<(Entry, f64)> {
    let p = params.probs(&d.candidates);
    let q = reference.probs(&d.candidates);
    let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum();
    d.candidates
        .iter()
        .enumerate()
        .map(|(k, &e)| (e, p[k] * (p[k].ln() - q[k].ln() - kl)))
        .collect()
}

/// Dense gradient with one buffer per table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub constructor: Vec<f64>,
    pub solver: Vec<f64>,
    pub fcp: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(p: &ToyParams) -> Self {
        Self {
            constructor: vec![0.0; p.constructor_logits.len()],
            solver: vec![0.0; p.solver_logits.len()],
            fcp: vec![0.0; p.fcp_logits.len()],
        }
    }

    pub fn table(&self, t: Table) -> &[f64] {
        match t {
            Table::Constructor => &self.constructor,
            Table::Solver => &self.solver,
            Table::Fcp => &self.fcp,
        }
    }

    pub fn add(&mut self, e: Entry, v: f64) {
        let buf = match e.table {
            Table::Constructor => &mut self.constructor,
            Table::Solver => &mut self.solver,
            Table::Fcp => &mut self.fcp,
        };
        buf[e.index] += v;
    }

    pub fn get(&self, e: Entry) -> f64 {
        self.table(e.table)[e.index]
    }

    pub fn all_finite(&self) -> bool {
        self.constructor.iter().chain(&self.solver).chain(&self.fcp).all(|v| v.is_finite())
    }
}

/// One sampled decision with its group-relative advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub decision: Decision,
    pub advantage: f64,
    pub logprob_old: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBand {
    pub eps_low: f64,
    pub eps_high: f64,
}

/// Mean over groups of each group's mean clipped surrogate, minus
/// `kl_coeff` times the mean per-decision KL to `reference`.
pub fn grpo_objective_value(
    params: &ToyParams,
    groups: &[Vec<PolicySample>],
    band: ClipBand,
    kl_coeff: f64,
    reference: &ToyParams,
) -> f64 {
    let live: Vec<&Vec<PolicySample>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if live.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for g in &live {
        let mut s = 0.0;
        for smp in g.iter() {
            let rho = (logprob(params, &smp.decision) - smp.logprob_old).exp();
            s += clipped_term(rho, smp.advantage, band.eps_low, band.eps_high);
            if kl_coeff != 0.0 {
                s -= kl_coeff * decision_kl(params, reference, &smp.decision);
            }
        }
        total += s / g.len() as f64;
    }
    total / live.len() as f64
}

pub fn grpo_gradient(
    params: &ToyParams,
    groups: &[Vec<PolicySample>],
    band: ClipBand,
    kl_coeff: f64,
    reference: &ToyParams,
) -> Gradient {
    let mut grad = Gradient::zeros_like(params);
    let live: Vec<&Vec<PolicySample>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if live.is_empty() {
        return grad;
    }
    let outer = 1.0 / live.len() as f64;
    for g in &live {
        let w = outer / g.len() as f64;
        for smp in g.iter() {
            let rho = (logprob(params, &smp.decision) - smp.logprob_old).exp();
            if smp.advantage != 0.0 && !clip_active(rho, smp.advantage, band.eps_low, band.eps_high) {
                let scale = w * smp.advantage * rho;
                for (e, gl) in grad_logprob(params, &smp.decision) {
                    grad.add(e, scale * gl);
                }
            }
            if kl_coeff != 0.0 {
                for (e, gk) in grad_decision_kl(params, reference, &smp.decision) {
                    grad.add(e, -w * kl_coeff * gk);
                }
            }
        }
    }
    grad
}

/// A likelihood target: the decision plus a per-sample weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDecision {
    pub decision: Decision,
    pub weight: f64,
}

/// `-(1/|S|) Σ w · log π(decision)`.
pub fn nll_value(params: &ToyParams, samples: &[WeightedDecision]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    -samples.iter().map(|s| s.weight * logprob(params, &s.decision)).sum::<f64>() / samples.len() as f64
}

pub fn nll_gradient(params: &ToyParams, samples: &[WeightedDecision]) -> Gradient {
    let mut grad = Gradient::zeros_like(params);
    if samples.is_empty() {
        return grad;
    }
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        for (e, g) in grad_logprob(params, &s.decision) {
            grad.add(e, -w * s.weight * g);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ToyDims {
        ToyDims { vocab: 4, contexts: 3, position_features: 5 }
    }

    #[test]
    fn equal_logits_give_ln_half() {
        let p = ToyParams::zeros(dims());
        let d = Decision { candidates: vec![Entry::new(Table::Solver, 0), Entry::new(Table::Solver, 1)], chosen: 0 };
        assert!((logprob(&p, &d) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_chosen_is_one_minus_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ToyParams::zeros(dims());
        for v in p.solver_logits.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let d = Decision { candidates: p.solver_row(1), chosen: 2 };
        let probs = p.probs(&d.candidates);
        let g = grad_logprob(&p, &d);
        assert!((g[2].1 - (1.0 - probs[2])).abs() < 1e-15);
        assert!((g.iter().map(|x| x.1).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn logprob_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut p = ToyParams::zeros(dims());
            for v in p.solver_logits.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let d = Decision { candidates: p.solver_row(rng.gen_range(0..3)), chosen: rng.gen_range(0..4) };
            for (e, analytic) in grad_logprob(&p, &d) {
                let h = 1e-6;
                let mut plus = p.clone();
                *plus.get_mut(e) += h;
                let mut minus = p.clone();
                *minus.get_mut(e) -= h;
                let fd = (logprob(&plus, &d) - logprob(&minus, &d)) / (2.0 * h);
                let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
                assert!(rel <= 1e-5, "fd {fd} analytic {analytic}");
            }
        }
    }

    #[test]
    fn kl_gradient_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ToyParams::zeros(dims());
        let mut r = ToyParams::zeros(dims());
        for (a, b) in p.solver_logits.iter_mut().zip(r.solver_logits.iter_mut()) {
            *a = rng.gen_range(-2.0..2.0);
            *b = rng.gen_range(-2.0..2.0);
        }
        let d = Decision { candidates: p.solver_row(0), chosen: 1 };
        for (e, analytic) in grad_decision_kl(&p, &r, &d) {
            let h = 1e-6;
            let mut plus = p.clone();
            *plus.get_mut(e) += h;
            let mut minus = p.clone();
            *minus.get_mut(e) -= h;
            let fd = (decision_kl(&plus, &r, &d) - decision_kl(&minus, &r, &d)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3));
        }
    }

    #[test]
    fn softmax_mass() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((entropy(&softmax(&[0.0; 10])) - 10f64.ln()).abs() < 1e-12);
    }
}
