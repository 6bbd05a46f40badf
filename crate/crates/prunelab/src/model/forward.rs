//! Tape-based forward pass with structured masking.

use crate::tensor::{NodeId, Tape, Tensor};

use super::{Checkpoint, ModelError, Result, ROPE_BASE};

/// Handles into a recorded forward pass: the logits node, every weight
/// leaf in canonical order, and the inputs of each linear layer (used by
/// activation-statistics scoring).
pub struct ForwardGraph {
    pub logits: NodeId,
    /// (name, leaf id) in the same order as [`super::Weights::named`].
    pub weight_ids: Vec<(String, NodeId)>,
    pub taps: Vec<BlockTaps>,
}

/// Inputs feeding each linear layer of one block.
pub struct BlockTaps {
    /// Input rows of wq / wk / wv.
    pub attn_input: NodeId,
    /// Masked per-head context rows feeding wo.
    pub attn_ctx: NodeId,
    /// Input rows of w_up / w_gate.
    pub mlp_input: NodeId,
    /// Masked gated-hidden rows feeding w_down.
    pub mlp_hidden: NodeId,
}

struct BlockIds {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    w_up: NodeId,
    w_gate: NodeId,
    w_down: NodeId,
    attn_norm: NodeId,
    mlp_norm: NodeId,
}

/// Record the masked forward pass of `ckpt` over `tokens` onto `tape`.
///
/// Masked heads and channels are zeroed right before their output
/// projection, which makes their contribution exactly zero and starves
/// their weights of gradient.
pub fn build_forward(
    tape: &mut Tape,
    ckpt: &Checkpoint,
    tokens: &[usize],
    weights_require_grad: bool,
) -> Result<ForwardGraph> {
    let cfg = &ckpt.config;
    if tokens.len() > cfg.max_context {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_context,
        });
    }
    let vocab = ckpt.weights.tok_emb.shape()[0];
    if let Some(&bad) = tokens.iter().find(|t| **t >= vocab) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab,
        });
    }
    if ckpt.mask.blocks.len() != ckpt.weights.blocks.len() {
        return Err(ModelError::MaskShape(format!(
            "mask has {} blocks, model has {}",
            ckpt.mask.blocks.len(),
            ckpt.weights.blocks.len()
        )));
    }

    let rg = weights_require_grad;
    let mut weight_ids = Vec::new();
    let tok_emb = tape.leaf(ckpt.weights.tok_emb.clone(), rg);
    weight_ids.push(("tok_emb".to_string(), tok_emb));
    let mut block_ids = Vec::with_capacity(ckpt.weights.blocks.len());
    for (i, b) in ckpt.weights.blocks.iter().enumerate() {
        let ids = BlockIds {
            wq: tape.leaf(b.wq.clone(), rg),
            wk: tape.leaf(b.wk.clone(), rg),
            wv: tape.leaf(b.wv.clone(), rg),
            wo: tape.leaf(b.wo.clone(), rg),
            w_up: tape.leaf(b.w_up.clone(), rg),
            w_gate: tape.leaf(b.w_gate.clone(), rg),
            w_down: tape.leaf(b.w_down.clone(), rg),
            attn_norm: tape.leaf(b.attn_norm.clone(), rg),
            mlp_norm: tape.leaf(b.mlp_norm.clone(), rg),
        };
        weight_ids.push((format!("block{i}.wq"), ids.wq));
        weight_ids.push((format!("block{i}.wk"), ids.wk));
        weight_ids.push((format!("block{i}.wv"), ids.wv));
        weight_ids.push((format!("block{i}.wo"), ids.wo));
        weight_ids.push((format!("block{i}.w_up"), ids.w_up));
        weight_ids.push((format!("block{i}.w_gate"), ids.w_gate));
        weight_ids.push((format!("block{i}.w_down"), ids.w_down));
        weight_ids.push((format!("block{i}.attn_norm"), ids.attn_norm));
        weight_ids.push((format!("block{i}.mlp_norm"), ids.mlp_norm));
        block_ids.push(ids);
    }
    let final_norm = tape.leaf(ckpt.weights.final_norm.clone(), rg);
    weight_ids.push(("final_norm".to_string(), final_norm));
    let out_proj = tape.leaf(ckpt.weights.out_proj.clone(), rg);
    weight_ids.push(("out_proj".to_string(), out_proj));

    let d_head = cfg.d_head;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut x = tape.embedding(tok_emb, tokens)?;
    let mut taps = Vec::with_capacity(block_ids.len());
    for (bi, ids) in block_ids.iter().enumerate() {
        let bw = &ckpt.weights.blocks[bi];
        let bm = &ckpt.mask.blocks[bi];
        if bm.heads.len() != bw.n_heads || bm.channels.len() != bw.d_mlp {
            return Err(ModelError::MaskShape(format!(
                "block {bi}: mask ({} heads, {} channels) vs weights ({}, {})",
                bm.heads.len(),
                bm.channels.len(),
                bw.n_heads,
                bw.d_mlp
            )));
        }

        // Attention.
        let h = tape.rms_norm(x, ids.attn_norm)?;
        let q = tape.matmul(h, ids.wq)?;
        let k = tape.matmul(h, ids.wk)?;
        let v = tape.matmul(h, ids.wv)?;
        let q = tape.rope(q, d_head, ROPE_BASE)?;
        let k = tape.rope(k, d_head, ROPE_BASE)?;
        let mut head_ctx = Vec::with_capacity(bw.n_heads);
        for hi in 0..bw.n_heads {
            let qh = tape.slice_cols(q, hi * d_head, d_head)?;
            let kh = tape.slice_cols(k, hi * d_head, d_head)?;
            let vh = tape.slice_cols(v, hi * d_head, d_head)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.causal_softmax(scores)?;
            head_ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let head_colmask: Vec<f64> = bm
            .heads
            .iter()
            .flat_map(|keep| std::iter::repeat(if *keep { 1.0 } else { 0.0 }).take(d_head))
            .collect();
        let ctx = tape.mul_col_mask(ctx, &head_colmask)?;
        let attn_out = tape.matmul(ctx, ids.wo)?;
        let x_attn = tape.add(x, attn_out)?;

        // Gated MLP.
        let h2 = tape.rms_norm(x_attn, ids.mlp_norm)?;
        let up = tape.matmul(h2, ids.w_up)?;
        let gate = tape.matmul(h2, ids.w_gate)?;
        let act = tape.silu(gate)?;
        let hidden = tape.mul(act, up)?;
        let ch_mask: Vec<f64> = bm
            .channels
            .iter()
            .map(|keep| if *keep { 1.0 } else { 0.0 })
            .collect();
        let hidden = tape.mul_col_mask(hidden, &ch_mask)?;
        let mlp_out = tape.matmul(hidden, ids.w_down)?;
        x = tape.add(x_attn, mlp_out)?;

        taps.push(BlockTaps {
            attn_input: h,
            attn_ctx: ctx,
            mlp_input: h2,
            mlp_hidden: hidden,
        });
    }

    let xf = tape.rms_norm(x, final_norm)?;
    let logits = tape.matmul(xf, out_proj)?;
    Ok(ForwardGraph {
        logits,
        weight_ids,
        taps,
    })
}

/// Logits [len, vocab] of a masked forward pass.
pub fn forward_logits(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, ckpt, tokens, false)?;
    Ok(tape.value(graph.logits).clone())
}
