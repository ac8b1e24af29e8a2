//! Synthetic documents: chains of modular equations `a ∘ b = c` where each
//! result feeds the next equation's left operand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Document, Violation};

/// Tokens per equation: `a`, operator, `b`, `=`, `c`.
pub const STRIDE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub vocab_size: u32,
    pub chain_length: u32,
    pub modulus: u32,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self { vocab_size: 10, chain_length: 3, modulus: 10, seed: 0 }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.vocab_size < 2 {
            out.push(Violation::new("vocab_size", "vocab_size must be ≥ 2"));
        }
        if self.chain_length < 1 {
            out.push(Violation::new("chain_length", "chain_length must be ≥ 1"));
        }
        if self.modulus < 2 || self.modulus > self.vocab_size {
            out.push(Violation::new("modulus", "modulus must lie in [2, vocab_size]"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as u64, b as u64, modulus as u64);
        let r = match self {
            Op::Add => (a + b) % m,
            Op::Sub => (a + m - b % m) % m,
            Op::Mul => (a * b) % m,
        };
        r as u32
    }
}

/// Which operand of an equation a position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
    C,
}

impl Slot {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Equation {
    pub a: u32,
    pub op: Op,
    pub b: u32,
    pub c: u32,
}

impl Equation {
    pub fn get(&self, slot: Slot) -> u32 {
        match slot {
            Slot::A => self.a,
            Slot::B => self.b,
            Slot::C => self.c,
        }
    }

    pub fn with(&self, slot: Slot, v: u32) -> Self {
        let mut e = *self;
        match slot {
            Slot::A => e.a = v,
            Slot::B => e.b = v,
            Slot::C => e.c = v,
        }
        e
    }

    pub fn holds(&self, modulus: u32) -> bool {
        self.op.apply(self.a, self.b, modulus) == self.c
    }

    /// The two operands left visible when `slot` is masked, in equation order.
    pub fn visible(&self, slot: Slot) -> (u32, u32) {
        match slot {
            Slot::A => (self.b, self.c),
            Slot::B => (self.a, self.c),
            Slot::C => (self.a, self.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDocument {
    pub id: String,
    pub tokens: Vec<u32>,
    pub maskable_positions: Vec<usize>,
    pub vocab_size: u32,
    pub modulus: u32,
}

impl ToyDocument {
    fn op_token(&self, op: Op) -> u32 {
        self.vocab_size + op.index() as u32
    }

    fn eq_token(&self) -> u32 {
        self.vocab_size + 3
    }

    fn from_equations(id: String, eqs: &[Equation], vocab_size: u32, modulus: u32) -> Self {
        let mut doc = Self { id, tokens: Vec::new(), maskable_positions: Vec::new(), vocab_size, modulus };
        for e in eqs {
            let toks = [e.a, doc.op_token(e.op), e.b, doc.eq_token(), e.c];
            doc.tokens.extend(toks);
        }
        doc.maskable_positions = (0..doc.tokens.len())
            .filter(|&p| doc.slot_at(p).is_some() && doc.consistent_values(p).len() == 1)
            .collect();
        doc
    }

    pub fn equation_count(&self) -> usize {
        self.tokens.len() / STRIDE
    }

    pub fn equation(&self, k: usize) -> Equation {
        let t = &self.tokens[k * STRIDE..(k + 1) * STRIDE];
        let op = Op::ALL[(t[1] - self.vocab_size) as usize];
        Equation { a: t[0], op, b: t[2], c: t[4] }
    }

    pub fn slot_at(&self, pos: usize) -> Option<Slot> {
        match pos % STRIDE {
            0 => Some(Slot::A),
            2 => Some(Slot::B),
            4 => Some(Slot::C),
            _ => None,
        }
    }

    /// Equation and slot of an operand position.
    pub fn locate(&self, pos: usize) -> (Equation, Slot) {
        let slot = self.slot_at(pos).expect("operand position");
        (self.equation(pos / STRIDE), slot)
    }

    /// Residues that make the position's equation hold when substituted.
    pub fn consistent_values(&self, pos: usize) -> Vec<u32> {
        let (eq, slot) = self.locate(pos);
        (0..self.modulus).filter(|&v| eq.with(slot, v).holds(self.modulus)).collect()
    }

    fn token_text(&self, t: u32) -> String {
        if t < self.vocab_size {
            t.to_string()
        } else if t == self.eq_token() {
            "=".into()
        } else {
            Op::ALL[(t - self.vocab_size) as usize].symbol().into()
        }
    }

    fn render_with(&self, masked: Option<usize>) -> String {
        let mut parts = Vec::with_capacity(self.equation_count());
        for k in 0..self.equation_count() {
            let words: Vec<String> = (k * STRIDE..(k + 1) * STRIDE)
                .map(|p| if Some(p) == masked { "_".to_string() } else { self.token_text(self.tokens[p]) })
                .collect();
            parts.push(words.join(" "));
        }
        parts.join(" ; ")
    }

    pub fn render(&self) -> String {
        self.render_with(None)
    }

    pub fn render_masked(&self, pos: usize) -> String {
        self.render_with(Some(pos))
    }

    pub fn to_document(&self, seed: u64) -> Document {
        Document { id: self.id.clone(), text: self.render(), source: "toy".into(), seed: Some(seed) }
    }
}

/// Deterministic under `spec.seed`.
pub fn gen_corpus(spec: &ToyCorpusSpec, count: usize) -> Vec<ToyDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.modulus;
    (0..count)
        .map(|i| {
            let mut a = rng.gen_range(0..m);
            let eqs: Vec<Equation> = (0..spec.chain_length)
                .map(|_| {
                    let op = Op::ALL[rng.gen_range(0..3)];
                    let b = rng.gen_range(0..m);
                    let c = op.apply(a, b, m);
                    let e = Equation { a, op, b, c };
                    a = c;
                    e
                })
                .collect();
            ToyDocument::from_equations(format!("toy-{i:05}"), &eqs, spec.vocab_size, m)
        })
        .collect()
}
