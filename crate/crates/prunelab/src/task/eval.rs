//! Exact-match evaluation: decode, extract the final answer, compare.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{decode, Checkpoint};

use super::{Result, TaskInstance, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub question: String,
    pub gold: i64,
    pub decoded: String,
    pub extracted: Option<i64>,
    pub matched: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

/// Decode every question and score the extracted answers. A missing
/// `####` delimiter or unparsable integer counts as incorrect and is
/// recorded, never raised. Decoding runs per instance with seed
/// `seed ^ index`, so results are order-stable and reproducible.
pub fn evaluate_exact_match(
    ckpt: &Checkpoint,
    instances: &[TaskInstance],
    vocab: &Vocab,
    temperature: f64,
    seed: u64,
    max_new: usize,
) -> Result<EvalOutcome> {
    let records: Vec<EvalRecord> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| -> Result<EvalRecord> {
            let prompt = vocab.tokenize(&inst.question)?
                .into_iter()
                .chain(std::iter::once(vocab.id(vocab.prompt_delim()).expect("delim in vocab")))
                .collect::<Vec<_>>();
            let continuation = decode(
                ckpt,
                &prompt,
                temperature,
                max_new,
                seed ^ i as u64,
                Some(vocab.end_token()),
            )?;
            let decoded = vocab.detokenize(&continuation)?;
            let extracted = extract_final_answer(&decoded);
            Ok(EvalRecord {
                seed: inst.seed,
                question: inst.question.clone(),
                gold: inst.answer,
                decoded,
                extracted,
                matched: extracted == Some(inst.answer),
            })
        })
        .collect::<Result<_>>()?;
    let matches = records.iter().filter(|r| r.matched).count();
    Ok(EvalOutcome {
        accuracy: matches as f64 / records.len().max(1) as f64,
        records,
    })
}

/// Scan for the last `####` delimiter and parse the integer after it.
/// No regex: find the final occurrence, skip spaces, read an optional
/// sign and digits, stop at the first non-digit.
pub fn extract_final_answer(text: &str) -> Option<i64> {
    let pos = text.rfind("####")?;
    let rest = text[pos + 4..].trim_start_matches(' ');
    let mut chars = rest.chars().peekable();
    let mut digits = String::new();
    if chars.peek() == Some(&'-') {
        digits.push('-');
        chars.next();
    }
    while let Some(c) = chars.peek() {
        if c.is_ascii_digit() {
            digits.push(*c);
            chars.next();
        } else {
            break;
        }
    }
    digits.parse().ok()
}
