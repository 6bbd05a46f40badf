//! Calibration traces: building, masking and regenerating the set the
//! importance scorers consume.
//!
//! A trace pairs a task prompt with a continuation. The continuation
//! can be decoded by the model itself, copied from the gold label, or
//! drawn as uniform token noise; the [`DecodeMask`] marks which label
//! positions of the concatenated sequence belong to the continuation so
//! losses can ignore the prompt entirely.

mod store;

pub use store::{read_traces, write_traces};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{decode, Checkpoint, ModelError};
use crate::task::{Corpus, TaskError, TaskInstance, Vocab};

#[derive(Debug, Error)]
pub enum CalError {
    #[error("regeneration ratio {0} outside [0, 1]")]
    RhoOutOfRange(f64),
    #[error("calibration pool has {have} prompts, need {need}")]
    PromptPoolTooSmall { have: usize, need: usize },
    #[error("{traces} traces for {prompts} prompts; counts must match")]
    TraceCount { traces: usize, prompts: usize },
    #[error("trace for prompt {prompt_index} has no usable decode positions")]
    EmptyTrace { prompt_index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Prompts in the fixed set X.
    pub n_prompts: usize,
    /// Token budget L for each continuation.
    pub max_trace_len: usize,
    pub temperature: f64,
    /// Base decode seed; prompt i decodes with `base_seed ^ i`.
    pub base_seed: u64,
    /// Seed for sampling the prompt set.
    pub prompt_seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_prompts: 64,
            max_trace_len: 128,
            temperature: 0.6,
            base_seed: 0,
            prompt_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    SelfGenerated,
    TaskLabel,
    Generic,
}

impl std::fmt::Display for TraceSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TraceSource::SelfGenerated => "self_generated",
            TraceSource::TaskLabel => "task_label",
            TraceSource::Generic => "generic",
        };
        f.write_str(s)
    }
}

/// One calibration example. Fields are read-only once built: source and
/// provenance never change; regeneration replaces whole traces instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrace {
    prompt_index: usize,
    prompt: Vec<usize>,
    continuation: Vec<usize>,
    source: TraceSource,
    /// Sparsity milestone of the checkpoint that produced the
    /// continuation (0 for the dense model and for static sources).
    milestone: f64,
    seed: u64,
    /// Set when the prompt decoded to nothing twice; such traces are
    /// kept for bookkeeping but excluded from gradient accumulation.
    warn_empty: bool,
}

impl CalibrationTrace {
    pub fn prompt_index(&self) -> usize {
        self.prompt_index
    }

    pub fn prompt(&self) -> &[usize] {
        &self.prompt
    }

    pub fn continuation(&self) -> &[usize] {
        &self.continuation
    }

    pub fn source(&self) -> TraceSource {
        self.source
    }

    pub fn milestone(&self) -> f64 {
        self.milestone
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn warn_empty(&self) -> bool {
        self.warn_empty
    }

    pub fn usable(&self) -> bool {
        !self.warn_empty && !self.continuation.is_empty()
    }

    /// Concatenated prompt + continuation tokens.
    pub fn sequence(&self) -> Vec<usize> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.continuation);
        seq
    }

    /// Next-token labels for the concatenated sequence: row t is token
    /// t+1; the final row has no label and is always masked out.
    pub fn labels(&self) -> Vec<usize> {
        let seq = self.sequence();
        let mut labels = vec![0usize; seq.len()];
        labels[..seq.len() - 1].copy_from_slice(&seq[1..]);
        labels
    }
}

/// Boolean mask over label rows of a concatenated trace sequence: false
/// on every prompt position, true exactly where the label is a
/// continuation token. Z counts the true entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeMask {
    pub mask: Vec<bool>,
    pub z: usize,
}

/// Build the decode-phase mask of a trace. Errors when the trace has no
/// continuation (Z would be 0).
pub fn build_decode_mask(trace: &CalibrationTrace) -> Result<DecodeMask> {
    let px = trace.prompt.len();
    let n = px + trace.continuation.len();
    if trace.continuation.is_empty() || trace.warn_empty {
        return Err(CalError::EmptyTrace {
            prompt_index: trace.prompt_index,
        });
    }
    // Label row t predicts token t+1: continuation labels live at rows
    // px-1 ..= n-2.
    let mask: Vec<bool> = (0..n).map(|t| t + 1 >= px && t + 2 <= n).collect();
    let z = mask.iter().filter(|m| **m).count();
    debug_assert_eq!(z, trace.continuation.len());
    Ok(DecodeMask { mask, z })
}

/// A prompt from the calibration pool: the instance plus its tokenized
/// question + delimiter.
#[derive(Debug, Clone, PartialEq)]
pub struct CalPrompt {
    pub index: usize,
    pub instance: TaskInstance,
    pub tokens: Vec<usize>,
}

/// Sample the fixed prompt set X from the corpus calibration split.
/// Deterministic in `prompt_seed`; the same X is reused at every
/// milestone of a run.
pub fn sample_prompt_set(
    corpus: &Corpus,
    cfg: &CalibrationConfig,
    vocab: &Vocab,
) -> Result<Vec<CalPrompt>> {
    if corpus.cal.len() < cfg.n_prompts {
        return Err(CalError::PromptPoolTooSmall {
            have: corpus.cal.len(),
            need: cfg.n_prompts,
        });
    }
    let mut order: Vec<usize> = (0..corpus.cal.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prompt_seed);
    order.shuffle(&mut rng);
    order[..cfg.n_prompts]
        .iter()
        .enumerate()
        .map(|(index, &pool_idx)| {
            let instance = corpus.cal[pool_idx].clone();
            let mut tokens = vocab.tokenize(&instance.question)?;
            tokens.push(vocab.id(vocab.prompt_delim()).expect("delimiter in vocab"));
            Ok(CalPrompt {
                index,
                instance,
                tokens,
            })
        })
        .collect()
}

/// Continuation budget for a prompt: the trace cap L, further limited by
/// the model context.
fn budget(cfg: &CalibrationConfig, ckpt: &Checkpoint, prompt_len: usize) -> usize {
    cfg.max_trace_len
        .min(ckpt.config.max_context.saturating_sub(prompt_len))
}

/// Decode one self-generated trace; on an empty decode, retry once with
/// seed+1 and flag the trace if still empty.
fn decode_trace(
    ckpt: &Checkpoint,
    prompt: &CalPrompt,
    cfg: &CalibrationConfig,
    seed: u64,
    vocab: &Vocab,
) -> Result<CalibrationTrace> {
    let max_new = budget(cfg, ckpt, prompt.tokens.len());
    let stop = Some(vocab.end_token());
    let mut used_seed = seed;
    let mut continuation = decode(
        ckpt,
        &prompt.tokens,
        cfg.temperature,
        max_new,
        used_seed,
        stop,
    )?;
    if continuation.is_empty() {
        used_seed = seed.wrapping_add(1);
        continuation = decode(
            ckpt,
            &prompt.tokens,
            cfg.temperature,
            max_new,
            used_seed,
            stop,
        )?;
    }
    let warn_empty = continuation.is_empty();
    Ok(CalibrationTrace {
        prompt_index: prompt.index,
        prompt: prompt.tokens.clone(),
        continuation,
        source: TraceSource::SelfGenerated,
        milestone: ckpt.provenance.milestone_alpha,
        seed: used_seed,
        warn_empty,
    })
}

/// Collect one self-generated trace per prompt, decoding with per-prompt
/// seed `base_seed ^ index`.
pub fn collect_traces(
    ckpt: &Checkpoint,
    prompts: &[CalPrompt],
    cfg: &CalibrationConfig,
    vocab: &Vocab,
) -> Result<Vec<CalibrationTrace>> {
    prompts
        .par_iter()
        .map(|p| decode_trace(ckpt, p, cfg, cfg.base_seed ^ p.index as u64, vocab))
        .collect()
}

/// Gold-label traces: the continuation is the tokenized gold target,
/// truncated to the trace budget.
pub fn label_traces(
    prompts: &[CalPrompt],
    cfg: &CalibrationConfig,
    ckpt: &Checkpoint,
    vocab: &Vocab,
) -> Result<Vec<CalibrationTrace>> {
    prompts
        .iter()
        .map(|p| {
            let mut continuation = vocab.tokenize(&p.instance.target)?;
            continuation.truncate(budget(cfg, ckpt, p.tokens.len()));
            Ok(CalibrationTrace {
                prompt_index: p.index,
                prompt: p.tokens.clone(),
                continuation,
                source: TraceSource::TaskLabel,
                milestone: 0.0,
                seed: 0,
                warn_empty: false,
            })
        })
        .collect()
}

/// Distribution-mismatched traces: uniformly random tokens of the same
/// total length as the slot's gold trace, split half prompt / half
/// continuation.
pub fn generic_traces(
    prompts: &[CalPrompt],
    cfg: &CalibrationConfig,
    ckpt: &Checkpoint,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<CalibrationTrace>> {
    let labels = label_traces(prompts, cfg, ckpt, vocab)?;
    labels
        .iter()
        .map(|l| {
            let total = (l.prompt.len() + l.continuation.len()).max(2);
            let slot_seed = seed ^ l.prompt_index as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
            let tokens: Vec<usize> = (0..total)
                .map(|_| rng.gen_range(0..vocab.size()))
                .collect();
            let half = total / 2;
            Ok(CalibrationTrace {
                prompt_index: l.prompt_index,
                prompt: tokens[..half].to_vec(),
                continuation: tokens[half..].to_vec(),
                source: TraceSource::Generic,
                milestone: 0.0,
                seed: slot_seed,
                warn_empty: false,
            })
        })
        .collect()
}

/// Number of slots a ratio replaces: round(ρ·N), half up.
pub fn replacement_count(rho: f64, n: usize) -> usize {
    (rho * n as f64 + 0.5).floor() as usize
}

/// Refresh a ρ-fraction of the trace set from the current model.
///
/// Exactly `round(ρ·N)` slots — chosen by a seeded shuffle of slot
/// indices — get fresh decodes; the rest pass through untouched. The
/// prompt set and token budget stay fixed; only continuations change.
pub fn regenerate(
    traces: &[CalibrationTrace],
    ckpt_current: &Checkpoint,
    prompts: &[CalPrompt],
    cfg: &CalibrationConfig,
    rho: f64,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<CalibrationTrace>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CalError::RhoOutOfRange(rho));
    }
    if traces.len() != prompts.len() {
        return Err(CalError::TraceCount {
            traces: traces.len(),
            prompts: prompts.len(),
        });
    }
    let k = replacement_count(rho, traces.len());
    if k == 0 {
        return Ok(traces.to_vec());
    }
    let mut order: Vec<usize> = (0..traces.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let selected: std::collections::BTreeSet<usize> = order[..k].iter().copied().collect();

    let fresh: Vec<CalibrationTrace> = selected
        .par_iter()
        .map(|&slot| decode_trace(ckpt_current, &prompts[slot], cfg, seed ^ slot as u64, vocab))
        .collect::<Result<_>>()?;

    let mut out = traces.to_vec();
    for (slot, trace) in selected.into_iter().zip(fresh) {
        out[slot] = trace;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
