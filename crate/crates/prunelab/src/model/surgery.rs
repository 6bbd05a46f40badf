//! Physical removal of masked structures.

use crate::tensor::Tensor;

use super::{BlockWeights, Checkpoint, ModelError, Result, StructuredMask, Weights};

/// Shrink the model to the structures `mask` keeps.
///
/// Head removal deletes the head's Q/K/V column blocks and its O row
/// block; channel removal deletes one up column, one gate column and one
/// down row, so structural dependencies stay consistent. The provided
/// mask is interpreted against the checkpoint's current structures and
/// replaces whatever mask the checkpoint carried. The result's forward
/// pass equals the masked forward of the input, and its own mask is
/// all-true over the shrunken dimensions.
pub fn apply_removal(ckpt: &Checkpoint, mask: &StructuredMask) -> Result<Checkpoint> {
    mask.validate()?;
    if mask.blocks.len() != ckpt.weights.blocks.len() {
        return Err(ModelError::MaskShape(format!(
            "mask has {} blocks, model has {}",
            mask.blocks.len(),
            ckpt.weights.blocks.len()
        )));
    }
    let d_head = ckpt.config.d_head;
    let mut blocks = Vec::with_capacity(ckpt.weights.blocks.len());
    for (bi, (bw, bm)) in ckpt.weights.blocks.iter().zip(&mask.blocks).enumerate() {
        if bm.heads.len() != bw.n_heads || bm.channels.len() != bw.d_mlp {
            return Err(ModelError::MaskShape(format!(
                "block {bi}: mask ({} heads, {} channels) vs weights ({}, {})",
                bm.heads.len(),
                bm.channels.len(),
                bw.n_heads,
                bw.d_mlp
            )));
        }
        let head_cols: Vec<bool> = bm
            .heads
            .iter()
            .flat_map(|k| std::iter::repeat(*k).take(d_head))
            .collect();
        blocks.push(BlockWeights {
            n_heads: bm.heads.iter().filter(|k| **k).count(),
            d_mlp: bm.channels.iter().filter(|k| **k).count(),
            wq: take_cols(&bw.wq, &head_cols),
            wk: take_cols(&bw.wk, &head_cols),
            wv: take_cols(&bw.wv, &head_cols),
            wo: take_rows(&bw.wo, &head_cols),
            w_up: take_cols(&bw.w_up, &bm.channels),
            w_gate: take_cols(&bw.w_gate, &bm.channels),
            w_down: take_rows(&bw.w_down, &bm.channels),
            attn_norm: bw.attn_norm.clone(),
            mlp_norm: bw.mlp_norm.clone(),
        });
    }
    let weights = Weights {
        tok_emb: ckpt.weights.tok_emb.clone(),
        blocks,
        final_norm: ckpt.weights.final_norm.clone(),
        out_proj: ckpt.weights.out_proj.clone(),
    };
    let new_mask = StructuredMask::all_true_for(&weights);
    Ok(Checkpoint {
        config: ckpt.config.clone(),
        weights,
        mask: new_mask,
        provenance: ckpt.provenance.clone(),
    })
}

fn take_cols(t: &Tensor, keep: &[bool]) -> Tensor {
    let rows = t.shape()[0];
    let cols = t.shape()[1];
    debug_assert_eq!(cols, keep.len());
    let kept = keep.iter().filter(|k| **k).count();
    let mut data = Vec::with_capacity(rows * kept);
    for i in 0..rows {
        let row = &t.data()[i * cols..(i + 1) * cols];
        for (v, k) in row.iter().zip(keep) {
            if *k {
                data.push(*v);
            }
        }
    }
    Tensor::new(vec![rows, kept], data).expect("kept count matches")
}

fn take_rows(t: &Tensor, keep: &[bool]) -> Tensor {
    let rows = t.shape()[0];
    let cols = t.shape()[1];
    debug_assert_eq!(rows, keep.len());
    let kept = keep.iter().filter(|k| **k).count();
    let mut data = Vec::with_capacity(kept * cols);
    for (i, k) in keep.iter().enumerate() {
        if *k {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
    }
    Tensor::new(vec![kept, cols], data).expect("kept count matches")
}
