//! Dense-model training: next-token cross-entropy over the target span.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{build_forward, init_model, Checkpoint, ModelConfig};
use crate::tensor::{NodeId, Tape};

use super::{evaluate_exact_match, Corpus, Result, TaskError, TaskInstance, Vocab};

/// Sequences per parallel work unit during gradient accumulation. Fixed
/// so the batch partition (and thus fp summation order) never depends on
/// the thread count.
const PAR_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Held-out exact-match the run must reach.
    pub em_floor: f64,
    /// Epochs between held-out checks.
    pub eval_every: usize,
    /// Held-out instances per check (capped at the val split size).
    pub eval_instances: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Shuffle seed for epoch ordering.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            max_epochs: 60,
            em_floor: 0.95,
            eval_every: 2,
            eval_instances: 128,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub final_em: f64,
    pub steps: usize,
    pub epochs_run: usize,
}

/// One tokenized training sequence: inputs, shifted labels, and the
/// span mask selecting target-label rows only.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Encode question + `?` + target + `$`. Label row `t` predicts token
/// `t+1`; rows predicting prompt tokens are masked out, rows predicting
/// the target and the end token are kept.
pub fn encode_training_example(vocab: &Vocab, inst: &TaskInstance) -> Result<EncodedExample> {
    let text = format!(
        "{}{}{}$",
        inst.question,
        vocab.prompt_delim(),
        inst.target
    );
    let tokens = vocab.tokenize(&text)?;
    let n = tokens.len();
    let prompt_len = inst.question.chars().count() + 1;
    let mut labels = vec![0usize; n];
    labels[..n - 1].copy_from_slice(&tokens[1..]);
    let mask: Vec<bool> = (0..n).map(|t| t + 1 >= prompt_len && t + 2 <= n).collect();
    Ok(EncodedExample {
        tokens,
        labels,
        mask,
    })
}

/// Teacher-forced masked NLL of one sequence on a fresh tape.
fn sequence_loss(
    tape: &mut Tape,
    ckpt: &Checkpoint,
    ex: &EncodedExample,
    weights_require_grad: bool,
) -> Result<(NodeId, Vec<(String, NodeId)>)> {
    let graph = build_forward(tape, ckpt, &ex.tokens, weights_require_grad)?;
    let logp = tape.row_log_softmax(graph.logits)?;
    let picked = tape.take_per_row(logp, &ex.labels)?;
    let nll = tape.neg(picked)?;
    let loss = tape.masked_mean(nll, &ex.mask)?;
    Ok((loss, graph.weight_ids))
}

/// Mean loss and mean gradients (canonical weight order) over a batch.
/// Work is split into fixed-size chunks accumulated in index order, so
/// the result is bit-identical however many threads run.
fn batch_gradients(
    ckpt: &Checkpoint,
    batch: &[&EncodedExample],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n_weights = ckpt.weights.named().len();
    let chunks: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_chunks(PAR_CHUNK)
        .map(|chunk| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut loss_sum = 0.0;
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for ex in chunk {
                let mut tape = Tape::new();
                let (loss, weight_ids) = sequence_loss(&mut tape, ckpt, ex, true)?;
                loss_sum += tape.value(loss).item();
                tape.backward(loss)?;
                if acc.is_empty() {
                    acc = weight_ids
                        .iter()
                        .map(|(_, id)| tape.grad(*id).to_vec())
                        .collect();
                } else {
                    for ((_, id), slot) in weight_ids.iter().zip(&mut acc) {
                        for (d, g) in slot.iter_mut().zip(tape.grad(*id)) {
                            *d += g;
                        }
                    }
                }
            }
            Ok((loss_sum, acc))
        })
        .collect::<Result<_>>()?;

    let mut loss_sum = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_weights);
    for (chunk_loss, chunk_grads) in chunks {
        loss_sum += chunk_loss;
        if grads.is_empty() {
            grads = chunk_grads;
        } else {
            for (dst, src) in grads.iter_mut().zip(chunk_grads) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, grads))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, ckpt: &mut Checkpoint, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (idx, (_, w)) in ckpt.weights.named_mut().into_iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = w.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Largest decode budget the evaluator needs for a set of instances.
pub fn decode_budget(instances: &[TaskInstance]) -> usize {
    instances
        .iter()
        .map(|i| i.target.chars().count())
        .max()
        .unwrap_or(0)
        + 8
}

/// Train a dense model until the held-out exact match reaches the
/// configured floor, or fail with the final accuracy after `max_epochs`.
pub fn train_dense(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, TrainStats)> {
    if model_cfg.vocab_size != vocab.size() {
        return Err(TaskError::Setup(format!(
            "model vocab_size {} does not match vocabulary size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    let examples: Vec<EncodedExample> = corpus
        .train
        .iter()
        .map(|inst| encode_training_example(vocab, inst))
        .collect::<Result<_>>()?;
    if let Some(bad) = examples.iter().find(|e| e.tokens.len() > model_cfg.max_context) {
        return Err(TaskError::Setup(format!(
            "training sequence of length {} exceeds max context {}",
            bad.tokens.len(),
            model_cfg.max_context
        )));
    }

    let mut ckpt = init_model(model_cfg)?;
    let sizes: Vec<usize> = ckpt.weights.named().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(&sizes);

    let eval_slice = &corpus.val[..tcfg.eval_instances.min(corpus.val.len())];
    let max_new = decode_budget(eval_slice);

    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
        final_em: 0.0,
        steps: 0,
        epochs_run: 0,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..tcfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch_idx in order.chunks(tcfg.batch_size) {
            let batch: Vec<&EncodedExample> = batch_idx.iter().map(|i| &examples[*i]).collect();
            let (loss, mut grads) = batch_gradients(&ckpt, &batch)?;
            clip_gradients(&mut grads, tcfg.grad_clip);
            adam.step(&mut ckpt, &grads, tcfg);
            epoch_loss += loss;
            batches += 1;
            stats.steps += 1;
        }
        stats.epoch_losses.push(epoch_loss / batches as f64);
        stats.epochs_run = epoch + 1;

        let last = epoch + 1 == tcfg.max_epochs;
        if (epoch + 1) % tcfg.eval_every == 0 || last {
            let outcome = evaluate_exact_match(&ckpt, eval_slice, vocab, 0.0, 0, max_new)?;
            stats.final_em = outcome.accuracy;
            if outcome.accuracy >= tcfg.em_floor {
                return Ok((ckpt, stats));
            }
        }
    }
    Err(TaskError::TrainingBelowFloor {
        accuracy: stats.final_em,
        floor: tcfg.em_floor,
        epochs: stats.epochs_run,
    })
}
