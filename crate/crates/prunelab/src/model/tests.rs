use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::forward::build_forward;
use super::*;
use crate::tensor::Tape;

fn test_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_heads: 4,
        d_model: 16,
        d_head: 4,
        d_mlp: 12,
        vocab_size: 11,
        max_context: 16,
        rng_seed: seed,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> StructuredMask {
    let blocks = (0..cfg.n_blocks)
        .map(|_| {
            let mut heads: Vec<bool> = (0..cfg.n_heads).map(|_| rng.gen_bool(0.6)).collect();
            let mut channels: Vec<bool> = (0..cfg.d_mlp).map(|_| rng.gen_bool(0.6)).collect();
            heads[rng.gen_range(0..cfg.n_heads)] = true;
            channels[rng.gen_range(0..cfg.d_mlp)] = true;
            BlockMask { heads, channels }
        })
        .collect();
    StructuredMask { blocks }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = test_config(7);
    let a = init_model(&cfg).unwrap();
    let b = init_model(&cfg).unwrap();
    let la = forward_logits(&a, &[1, 2, 3]).unwrap();
    let lb = forward_logits(&b, &[1, 2, 3]).unwrap();
    assert_eq!(la.data(), lb.data());

    let c = init_model(&test_config(8)).unwrap();
    let lc = forward_logits(&c, &[1, 2, 3]).unwrap();
    assert_ne!(la.data(), lc.data());
}

#[test]
fn param_count_matches_closed_form() {
    let cfg = test_config(0);
    let ckpt = init_model(&cfg).unwrap();
    let d = cfg.d_model;
    let expected = cfg.n_blocks * (4 * d * d + 3 * d * cfg.d_mlp)   // block matrices
        + 2 * cfg.vocab_size * d                                    // embedding + head
        + (2 * cfg.n_blocks + 1) * d; // norms
    assert_eq!(ckpt.param_count(), expected);
    assert_eq!(ckpt.prunable_params(), cfg.total_prunable());
}

#[test]
fn masking_a_head_equals_zeroing_its_output_rows() {
    let cfg = test_config(3);
    let base = init_model(&cfg).unwrap();
    let tokens = [1, 5, 2, 9, 0, 4];
    let (block, head) = (1, 2);

    let mut masked = base.clone();
    masked.mask.blocks[block].heads[head] = false;

    let mut zeroed = base.clone();
    let d = cfg.d_model;
    for row in head * cfg.d_head..(head + 1) * cfg.d_head {
        zeroed.weights.blocks[block].wo.data_mut()[row * d..(row + 1) * d].fill(0.0);
    }

    let lm = forward_logits(&masked, &tokens).unwrap();
    let lz = forward_logits(&zeroed, &tokens).unwrap();
    assert!(max_abs_diff(lm.data(), lz.data()) <= 1e-12);
}

#[test]
fn masking_a_channel_equals_weight_surgery_on_up_gate_down() {
    let cfg = test_config(4);
    let base = init_model(&cfg).unwrap();
    let tokens = [3, 1, 4, 1, 5];
    let (block, ch) = (0, 7);

    let mut masked = base.clone();
    masked.mask.blocks[block].channels[ch] = false;

    let mut zeroed = base.clone();
    {
        let b = &mut zeroed.weights.blocks[block];
        let cols = b.w_up.shape()[1];
        for r in 0..b.w_up.shape()[0] {
            b.w_up.data_mut()[r * cols + ch] = 0.0;
            b.w_gate.data_mut()[r * cols + ch] = 0.0;
        }
        let dcols = b.w_down.shape()[1];
        b.w_down.data_mut()[ch * dcols..(ch + 1) * dcols].fill(0.0);
    }

    let lm = forward_logits(&masked, &tokens).unwrap();
    let lz = forward_logits(&zeroed, &tokens).unwrap();
    assert!(max_abs_diff(lm.data(), lz.data()) <= 1e-12);
}

#[test]
fn surgery_forward_matches_masked_forward() {
    let cfg = test_config(11);
    let base = init_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let mask = random_mask(&mut rng, &cfg);
        let tokens = random_tokens(&mut rng, 8, cfg.vocab_size);

        let mut masked = base.clone();
        masked.mask = mask.clone();
        let pruned = apply_removal(&base, &mask).unwrap();
        assert!(pruned.mask.is_all_true());

        let lm = forward_logits(&masked, &tokens).unwrap();
        let lp = forward_logits(&pruned, &tokens).unwrap();
        assert!(max_abs_diff(lm.data(), lp.data()) <= 1e-12);
    }
}

#[test]
fn removal_param_accounting() {
    let cfg = test_config(5);
    let base = init_model(&cfg).unwrap();

    // All-true mask: nothing changes.
    let same = apply_removal(&base, &base.mask).unwrap();
    assert_eq!(same.param_count(), base.param_count());

    // Remove 1 of 4 heads in one block: that block's attention mass
    // drops by exactly 25%.
    let mut mask = base.mask.clone();
    mask.blocks[0].heads[3] = false;
    let pruned = apply_removal(&base, &mask).unwrap();
    let attn = |c: &Checkpoint, b: usize| {
        let bw = &c.weights.blocks[b];
        bw.wq.len() + bw.wk.len() + bw.wv.len() + bw.wo.len()
    };
    assert_eq!(attn(&pruned, 0) * 4, attn(&base, 0) * 3);
    assert_eq!(attn(&pruned, 1), attn(&base, 1));
}

#[test]
fn sparsity_accounting() {
    let cfg = test_config(6);
    let base = init_model(&cfg).unwrap();
    assert_eq!(sparsity(&base.mask, &cfg), 0.0);

    // Half the heads and half the channels everywhere → exactly 0.5.
    let mut mask = base.mask.clone();
    for b in &mut mask.blocks {
        for h in offsets_half(b.heads.len()) {
            b.heads[h] = false;
        }
        for c in offsets_half(b.channels.len()) {
            b.channels[c] = false;
        }
    }
    assert!((sparsity(&mask, &cfg) - 0.5).abs() < 1e-12);

    // Arbitrary mask: matches a brute-force count over the surgery result.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let mask = random_mask(&mut rng, &cfg);
        let pruned = apply_removal(&base, &mask).unwrap();
        let removed = base.prunable_params() - pruned.prunable_params();
        let expected = removed as f64 / base.prunable_params() as f64;
        assert!((sparsity(&mask, &cfg) - expected).abs() < 1e-12);
        // The surgered checkpoint's own (all-true, shrunken) mask
        // reports the same sparsity against the dense config.
        assert!((pruned.sparsity() - expected).abs() < 1e-12);
    }
}

fn offsets_half(n: usize) -> Vec<usize> {
    (0..n / 2).collect()
}

#[test]
fn decode_contract() {
    let cfg = test_config(21);
    let ckpt = init_model(&cfg).unwrap();
    let prompt = [1, 2, 3];

    assert!(decode(&ckpt, &prompt, 0.0, 0, 0, None).unwrap().is_empty());

    let a = decode(&ckpt, &prompt, 0.0, 8, 0, None).unwrap();
    let b = decode(&ckpt, &prompt, 0.0, 8, 99, None).unwrap();
    assert_eq!(a, b, "greedy decode ignores the seed");

    let c = decode(&ckpt, &prompt, 0.6, 8, 7, None).unwrap();
    let d = decode(&ckpt, &prompt, 0.6, 8, 7, None).unwrap();
    assert_eq!(c, d, "seeded sampling is reproducible");

    let e = decode(&ckpt, &prompt, 0.6, 8, 8, None).unwrap();
    // Not guaranteed different, but should be for this model/seed pair.
    assert_ne!(c, e);

    // Context cap: prompt of max_context length admits no new tokens.
    let long = vec![1usize; cfg.max_context];
    assert!(decode(&ckpt, &long, 0.0, 4, 0, None).unwrap().is_empty());
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let cfg = test_config(13);
    let mut ckpt = init_model(&cfg).unwrap();
    ckpt.mask.blocks[0].heads[1] = false;
    ckpt.provenance.milestone_alpha = 0.25;
    ckpt.provenance.seeds.insert("decode".into(), 42);

    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    assert_eq!(loaded.config, ckpt.config);
    assert_eq!(loaded.mask, ckpt.mask);
    assert_eq!(loaded.provenance, ckpt.provenance);
    let tokens = [0, 3, 6, 9];
    let a = forward_logits(&ckpt, &tokens).unwrap();
    let b = forward_logits(&loaded, &tokens).unwrap();
    assert_eq!(a.data(), b.data(), "reloaded forward must be bit-identical");
}

#[test]
fn forward_is_causal() {
    let cfg = test_config(2);
    let ckpt = init_model(&cfg).unwrap();
    let base = forward_logits(&ckpt, &[1, 2, 3, 4, 5, 6]).unwrap();
    let edited = forward_logits(&ckpt, &[1, 2, 3, 9, 10, 7]).unwrap();
    let vocab = cfg.vocab_size;
    // Positions 0..2 predict from unchanged prefixes.
    assert_eq!(&base.data()[..3 * vocab], &edited.data()[..3 * vocab]);
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = test_config(1);
    let ckpt = init_model(&cfg).unwrap();
    assert!(matches!(
        forward_logits(&ckpt, &[1, 99]),
        Err(ModelError::TokenOutOfRange { token: 99, .. })
    ));
    let long = vec![0usize; cfg.max_context + 1];
    assert!(matches!(
        forward_logits(&ckpt, &long),
        Err(ModelError::SequenceTooLong { .. })
    ));
}

#[test]
fn masked_structures_receive_zero_gradient() {
    let cfg = test_config(9);
    let mut ckpt = init_model(&cfg).unwrap();
    let (block, head, ch) = (1, 0, 5);
    ckpt.mask.blocks[block].heads[head] = false;
    ckpt.mask.blocks[block].channels[ch] = false;

    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, &ckpt, &[1, 2, 3, 4], true).unwrap();
    let loss = tape.sum(graph.logits).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let by_name: std::collections::BTreeMap<_, _> = graph
        .weight_ids
        .iter()
        .map(|(n, id)| (n.clone(), grads[id].clone()))
        .collect();

    let d = cfg.d_model;
    let dh = cfg.d_head;
    for w in ["wq", "wk", "wv"] {
        let g = &by_name[&format!("block{block}.{w}")];
        for r in 0..d {
            for c in head * dh..(head + 1) * dh {
                assert_eq!(g.data()[r * d + c], 0.0, "{w} col {c} row {r}");
            }
        }
    }
    let go = &by_name[&format!("block{block}.wo")];
    for r in head * dh..(head + 1) * dh {
        for c in 0..d {
            assert_eq!(go.data()[r * d + c], 0.0);
        }
    }
    for w in ["w_up", "w_gate"] {
        let g = &by_name[&format!("block{block}.{w}")];
        for r in 0..d {
            assert_eq!(g.data()[r * cfg.d_mlp + ch], 0.0);
        }
    }
    let gd = &by_name[&format!("block{block}.w_down")];
    for c in 0..d {
        assert_eq!(gd.data()[ch * d + c], 0.0);
    }

    // An unmasked structure does get gradient somewhere.
    let gq = &by_name[&format!("block{block}.wq")];
    assert!(gq.data().iter().any(|v| *v != 0.0));
}

#[test]
fn config_validation() {
    let mut cfg = test_config(0);
    cfg.d_model = 15;
    assert!(init_model(&cfg).is_err());
    let mut cfg = test_config(0);
    cfg.n_blocks = 0;
    assert!(init_model(&cfg).is_err());
}
