use proptest::prelude::*;

use super::*;
use crate::model::{init_model, ModelConfig};

// ── independent arithmetic oracle ────────────────────────────────────
// Re-evaluates an instance from its question text alone: parse the
// chain, recompute every step, and check the stated answer and bounds.

fn oracle_answer(question: &str) -> i64 {
    let mut parts = question.split(';');
    let first = parts.next().expect("question has a first step");
    let op_pos = first
        .char_indices()
        .skip(1)
        .find(|(_, c)| ['+', '-', '*'].contains(c))
        .map(|(i, _)| i)
        .expect("first step has an operator");
    let a: i64 = first[..op_pos].parse().expect("first operand");
    let op = first.chars().nth(op_pos).unwrap();
    let b: i64 = first[op_pos + 1..].parse().expect("second operand");
    let mut acc = apply(op, a, b);
    for step in parts {
        let op = step.chars().next().expect("step operator");
        let b: i64 = step[1..].parse().expect("step operand");
        acc = apply(op, acc, b);
    }
    acc
}

fn apply(op: char, a: i64, b: i64) -> i64 {
    match op {
        '+' => a + b,
        '-' => a - b,
        '*' => a * b,
        _ => panic!("unknown operator {op}"),
    }
}

#[test]
fn one_step_forced_operands() {
    let inst = TaskInstance::from_chain(0, (3, MathOp::Add, 4), &[]);
    assert_eq!(inst.answer, 7);
    assert_eq!(inst.target, "3+4=7 #### 7");
    assert_eq!(inst.question, "3+4");
}

#[test]
fn multi_step_chain_format() {
    let inst = TaskInstance::from_chain(0, (17, MathOp::Add, 26), &[(MathOp::Sub, 8)]);
    assert_eq!(inst.question, "17+26;-8");
    assert_eq!(inst.cot, "17+26=43;43-8=35");
    assert_eq!(inst.target, "17+26=43;43-8=35 #### 35");
}

#[test]
fn generated_instances_pass_the_arithmetic_oracle() {
    let bound = 50;
    for seed in 0..2000 {
        let n_steps = 1 + (seed as usize % 4);
        let inst = gen_instance(seed, n_steps, bound);
        assert_eq!(oracle_answer(&inst.question), inst.answer, "{inst:?}");
        assert_eq!(inst.target, format!("{} #### {}", inst.cot, inst.answer));
        // Every worked step is arithmetically correct and in bounds.
        for step in inst.cot.split(';') {
            let (lhs, rhs) = step.split_once('=').expect("step has =");
            assert_eq!(oracle_answer(lhs), rhs.parse::<i64>().unwrap());
            let v: i64 = rhs.parse().unwrap();
            assert!((0..=bound).contains(&v), "{step} out of bounds");
        }
    }
}

#[test]
fn gen_is_deterministic() {
    let a = gen_instance(1234, 3, 50);
    let b = gen_instance(1234, 3, 50);
    assert_eq!(a, b);
    let c = gen_instance(1235, 3, 50);
    assert_ne!(a, c);
}

#[test]
fn tokenizer_basics() {
    let v = Vocab::standard();
    assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
    assert_eq!(v.tokenize("7").unwrap(), vec![7]);
    assert_eq!(v.size(), 19);
    let err = v.tokenize("3a4").unwrap_err();
    match err {
        TaskError::UnknownSymbol { symbol, pos } => {
            assert_eq!(symbol, 'a');
            assert_eq!(pos, 1);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

proptest! {
    #[test]
    fn tokenize_roundtrips(chars in proptest::collection::vec(0usize..SYMBOLS.len(), 0..64)) {
        let v = Vocab::standard();
        let text: String = chars.iter().map(|i| SYMBOLS[*i]).collect();
        let tokens = v.tokenize(&text).unwrap();
        prop_assert_eq!(v.detokenize(&tokens).unwrap(), text);
    }
}

#[test]
fn instance_roundtrip_through_tokenizer() {
    let v = Vocab::standard();
    for seed in 0..100 {
        let inst = gen_instance(seed, 2, 50);
        let text = format!("{}?{}$", inst.question, inst.target);
        let tokens = v.tokenize(&text).unwrap();
        assert_eq!(v.detokenize(&tokens).unwrap(), text);
    }
}

#[test]
fn answer_extraction() {
    assert_eq!(extract_final_answer("3+4=7 #### 7"), Some(7));
    assert_eq!(extract_final_answer("3+4=7"), None);
    assert_eq!(extract_final_answer("#### 12;junk"), Some(12));
    assert_eq!(extract_final_answer("x #### 1 #### 25"), Some(25));
    assert_eq!(extract_final_answer("#### -3"), Some(-3));
    assert_eq!(extract_final_answer("####   "), None);
}

#[test]
fn crafted_eval_set_matches_hand_count() {
    // Ten fixed decode outputs scored by hand: 4 match.
    let golds = [7, 12, 5, 40, 3, 9, 11, 2, 30, 8];
    let decoded = [
        "1+6=7 #### 7",    // match
        "#### 13",         // wrong value
        "2+3=5 #### 5",    // match
        "40",              // no delimiter
        "#### 3",          // match
        " ####9",          // match (no space before digits)
        "11 ####",         // delimiter but no digits
        "#### 2;",         // match? digits then ';' stops parse → 2 ✓
        "junk",            // nothing
        "#### 88",         // wrong value
    ];
    let n_match = golds
        .iter()
        .zip(&decoded)
        .filter(|(g, d)| extract_final_answer(d) == Some(**g))
        .count();
    assert_eq!(n_match, 5);
}

#[test]
fn corpus_splits_are_disjoint() {
    let cfg = CorpusConfig {
        seed: 3,
        n_train: 200,
        n_val: 40,
        n_cal: 40,
        n_test: 40,
        min_steps: 1,
        max_steps: 2,
        value_bound: 30,
        ..Default::default()
    };
    let corpus = build_corpus(&cfg);
    assert_eq!(corpus.train.len(), 200);
    let sets: Vec<std::collections::HashSet<&str>> =
        [&corpus.train, &corpus.val, &corpus.cal, &corpus.test]
            .iter()
            .map(|s| s.iter().map(|i| i.question.as_str()).collect())
            .collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            assert!(sets[i].is_disjoint(&sets[j]), "splits {i} and {j} overlap");
        }
    }
    // Rebuilding reproduces the corpus exactly.
    let again = build_corpus(&cfg);
    assert_eq!(corpus.train, again.train);
    assert_eq!(corpus.test, again.test);
}

#[test]
fn store_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("instances.jsonl");
    let instances: Vec<TaskInstance> = (0..10).map(|s| gen_instance(s, 2, 30)).collect();
    write_instances(&path, &instances).unwrap();
    assert_eq!(read_instances(&path).unwrap(), instances);
}

// ── training ─────────────────────────────────────────────────────────

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 19,
        max_context: 48,
        rng_seed: seed,
    }
}

fn tiny_corpus() -> Corpus {
    build_corpus(&CorpusConfig {
        seed: 0,
        n_train: 64,
        n_val: 24,
        n_cal: 8,
        n_test: 8,
        min_steps: 1,
        max_steps: 2,
        value_bound: 15,
        ..Default::default()
    })
}

#[test]
fn untrained_model_scores_at_chance() {
    let vocab = Vocab::standard();
    let corpus = tiny_corpus();
    let ckpt = init_model(&tiny_model(0)).unwrap();
    let out = evaluate_exact_match(&ckpt, &corpus.val, &vocab, 0.0, 0, 24).unwrap();
    assert!(out.accuracy <= 0.05, "untrained accuracy {}", out.accuracy);
    assert_eq!(out.records.len(), corpus.val.len());
}

#[test]
fn training_loss_decreases_and_is_seeded() {
    let vocab = Vocab::standard();
    let corpus = tiny_corpus();
    let tcfg = TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        eval_every: 3,
        em_floor: 0.0, // stop at the first evaluation
        eval_instances: 8,
        ..Default::default()
    };
    let (_, stats) = train_dense(&tiny_model(0), &corpus, &vocab, &tcfg).unwrap();
    assert_eq!(stats.epoch_losses.len(), 3);
    assert!(stats.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(
        stats.epoch_losses[0] > stats.epoch_losses[1]
            && stats.epoch_losses[1] > stats.epoch_losses[2],
        "losses {:?}",
        stats.epoch_losses
    );

    let (_, again) = train_dense(&tiny_model(0), &corpus, &vocab, &tcfg).unwrap();
    assert_eq!(stats.epoch_losses, again.epoch_losses, "training is seeded");
}

#[test]
fn training_floor_failure_reports_accuracy() {
    let vocab = Vocab::standard();
    let corpus = tiny_corpus();
    let tcfg = TrainConfig {
        batch_size: 16,
        max_epochs: 1,
        eval_every: 1,
        em_floor: 0.99,
        eval_instances: 8,
        ..Default::default()
    };
    match train_dense(&tiny_model(0), &corpus, &vocab, &tcfg) {
        Err(TaskError::TrainingBelowFloor { floor, .. }) => assert_eq!(floor, 0.99),
        other => panic!("expected floor failure, got {other:?}"),
    }
}

#[test]
fn target_span_mask_covers_target_and_end_only() {
    let vocab = Vocab::standard();
    let inst = TaskInstance::from_chain(0, (3, MathOp::Add, 4), &[]);
    let ex = encode_training_example(&vocab, &inst).unwrap();
    // text = "3+4?3+4=7 #### 7$", prompt = "3+4?" (4 chars)
    let n = ex.tokens.len();
    assert_eq!(n, 17);
    let expect: Vec<bool> = (0..n).map(|t| (3..=15).contains(&t)).collect();
    assert_eq!(ex.mask, expect);
    // Masked rows' labels are exactly the target + end tokens.
    let labelled: Vec<usize> = ex
        .mask
        .iter()
        .zip(&ex.labels)
        .filter(|(m, _)| **m)
        .map(|(_, l)| *l)
        .collect();
    assert_eq!(vocab.detokenize(&labelled).unwrap(), "3+4=7 #### 7$");
}
