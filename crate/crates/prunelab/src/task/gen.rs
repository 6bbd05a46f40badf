//! Synthetic multi-step arithmetic chains with worked solutions.
//!
//! An instance is a sequential chain: a first pair `a∘b`, then further
//! operations applied to the running result. The question spells the
//! chain without results ("17+26;-8"), the chain-of-thought target works
//! each step ("17+26=43;43-8=35") and ends with the `####`-delimited
//! final answer, mirroring common grade-school math formats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MathOp {
    Add,
    Sub,
    Mul,
}

impl MathOp {
    pub fn symbol(self) -> char {
        match self {
            MathOp::Add => '+',
            MathOp::Sub => '-',
            MathOp::Mul => '*',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            MathOp::Add => a + b,
            MathOp::Sub => a - b,
            MathOp::Mul => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub seed: u64,
    pub question: String,
    pub cot: String,
    pub answer: i64,
    pub target: String,
}

impl TaskInstance {
    /// Build an instance from explicit operands: a first pair and the
    /// remaining (operator, operand) steps.
    pub fn from_chain(seed: u64, first: (i64, MathOp, i64), rest: &[(MathOp, i64)]) -> Self {
        let (a, op, b) = first;
        let mut question = format!("{a}{}{b}", op.symbol());
        let mut current = op.apply(a, b);
        let mut cot = format!("{a}{}{b}={current}", op.symbol());
        for (op, b) in rest {
            question.push(';');
            question.push(op.symbol());
            question.push_str(&b.to_string());
            let next = op.apply(current, *b);
            cot.push_str(&format!(";{current}{}{b}={next}", op.symbol()));
            current = next;
        }
        let target = format!("{cot} #### {current}");
        TaskInstance {
            seed,
            question,
            cot,
            answer: current,
            target,
        }
    }
}

/// Deterministically generate one instance. Operators come from
/// {+,-,*}; every intermediate stays within [0, value_bound].
pub fn gen_instance(seed: u64, n_steps: usize, value_bound: i64) -> TaskInstance {
    assert!(n_steps >= 1, "n_steps must be >= 1");
    assert!(value_bound >= 2, "value_bound must be >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(1..=value_bound);
    let (op, b) = draw_step(&mut rng, a, value_bound);
    let first = (a, op, b);
    let mut current = op.apply(a, b);
    let mut rest = Vec::with_capacity(n_steps - 1);
    for _ in 1..n_steps {
        let (op, b) = draw_step(&mut rng, current, value_bound);
        rest.push((op, b));
        current = op.apply(current, b);
    }
    TaskInstance::from_chain(seed, first, &rest)
}

/// Pick an operator feasible at the current value, then an operand that
/// keeps the result within [0, bound].
fn draw_step(rng: &mut ChaCha8Rng, current: i64, bound: i64) -> (MathOp, i64) {
    let mut feasible = Vec::with_capacity(3);
    if current < bound {
        feasible.push(MathOp::Add);
    }
    if current >= 1 {
        feasible.push(MathOp::Sub);
    }
    let mul_max = if current == 0 {
        9
    } else {
        (bound / current).min(9)
    };
    if mul_max >= 2 {
        feasible.push(MathOp::Mul);
    }
    let op = feasible[rng.gen_range(0..feasible.len())];
    let b = match op {
        MathOp::Add => rng.gen_range(1..=bound - current),
        MathOp::Sub => rng.gen_range(1..=current),
        MathOp::Mul => rng.gen_range(2..=mul_max),
    };
    (op, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    /// Held-out slice the trainer uses for its exact-match floor.
    pub n_val: usize,
    /// Pool that calibration prompts are sampled from.
    pub n_cal: usize,
    pub n_test: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub value_bound: i64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_train: 2000,
            n_val: 128,
            n_cal: 256,
            n_test: 256,
            min_steps: 2,
            max_steps: 4,
            value_bound: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub cal: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

/// Seed-range width reserved for each split.
const SPLIT_RANGE: u64 = 1 << 24;
/// Mixes the instance seed before drawing its step count.
const STEPS_SALT: u64 = 0xa076_1d64_78bd_642f;

/// Build all four splits from disjoint seed ranges. Instances whose
/// question text collides with anything generated earlier are skipped,
/// so the splits are content-disjoint as well.
pub fn build_corpus(cfg: &CorpusConfig) -> Corpus {
    let mut seen = std::collections::HashSet::new();
    let mut make = |split_idx: u64, n: usize| {
        let base = cfg.seed.wrapping_add(split_idx * SPLIT_RANGE);
        let mut out = Vec::with_capacity(n);
        let mut offset = 0u64;
        let give_up = (n as u64 * 1000).clamp(100_000, SPLIT_RANGE);
        while out.len() < n {
            assert!(
                offset < give_up,
                "instance space too small for corpus sizes: \
                 {} of {n} unique instances after {offset} draws",
                out.len()
            );
            let seed = base.wrapping_add(offset);
            offset += 1;
            let n_steps = ChaCha8Rng::seed_from_u64(seed ^ STEPS_SALT)
                .gen_range(cfg.min_steps..=cfg.max_steps);
            let inst = gen_instance(seed, n_steps, cfg.value_bound);
            if seen.insert(inst.question.clone()) {
                out.push(inst);
            }
        }
        out
    };
    let train = make(0, cfg.n_train);
    let val = make(1, cfg.n_val);
    let cal = make(2, cfg.n_cal);
    let test = make(3, cfg.n_test);
    Corpus {
        config: cfg.clone(),
        train,
        val,
        cal,
        test,
    }
}
