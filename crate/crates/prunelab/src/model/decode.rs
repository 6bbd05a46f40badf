//! Autoregressive decoding with greedy or temperature sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_logits, Checkpoint, ModelError, Result};

/// Decode up to `max_new` continuation tokens after `prompt`.
///
/// Temperature 0 is greedy argmax with ties broken toward the lowest
/// token id; temperature > 0 samples from softmax(logits/temperature)
/// using a generator seeded per call, so a fixed (seed, temperature)
/// reproduces the continuation exactly. Decoding stops without emitting
/// when `stop_token` is drawn, and silently stops when the context is
/// full.
pub fn decode(
    ckpt: &Checkpoint,
    prompt: &[usize],
    temperature: f64,
    max_new: usize,
    seed: u64,
    stop_token: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(ModelError::Config("decode requires a nonempty prompt".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(ModelError::Config(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = prompt.to_vec();
    let mut continuation = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= ckpt.config.max_context {
            break;
        }
        let logits = forward_logits(ckpt, &tokens)?;
        let vocab = logits.shape()[1];
        let last = &logits.data()[(tokens.len() - 1) * vocab..tokens.len() * vocab];
        let next = if temperature == 0.0 {
            argmax_lowest(last)
        } else {
            sample(last, temperature, &mut rng)
        };
        if Some(next) == stop_token {
            break;
        }
        tokens.push(next);
        continuation.push(next);
    }
    Ok(continuation)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    for (i, e) in exps.iter().enumerate() {
        cum += e;
        if u < cum {
            return i;
        }
    }
    row.len() - 1
}
