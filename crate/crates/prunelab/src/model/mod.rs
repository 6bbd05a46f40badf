//! A small decoder-only transformer with structured masks.
//!
//! The architecture is deliberately plain: token embedding, pre-norm
//! blocks of multi-head causal self-attention (rotary positions) and a
//! gated SiLU MLP, a final RMS norm, and an untied output head. Masks
//! cover whole attention heads and whole MLP channels; a masked
//! structure contributes exactly zero to the block output and receives
//! exactly zero gradient, so masked forward and physical removal agree
//! to the last bit.

mod decode;
mod forward;
mod io;
mod surgery;

pub use decode::decode;
pub use forward::{build_forward, forward_logits, BlockTaps, ForwardGraph};
pub use io::{load_checkpoint, save_checkpoint};
pub use surgery::apply_removal;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Rotary embedding frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds max context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("mask mismatch: {0}")]
    MaskShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.n_blocks == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_head == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.max_context == 0
        {
            return err("all dimensions must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return err(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return err(format!("d_head {} must be even for rotary pairs", self.d_head));
        }
        if self.d_mlp < self.n_heads {
            return err(format!(
                "d_mlp {} < n_heads {}",
                self.d_mlp, self.n_heads
            ));
        }
        Ok(())
    }

    /// Parameter mass of one attention head: its Q/K/V column blocks
    /// plus its O row block.
    pub fn head_param_mass(&self) -> usize {
        4 * self.d_model * self.d_head
    }

    /// Parameter mass of one MLP channel: one up column, one gate
    /// column, one down row.
    pub fn channel_param_mass(&self) -> usize {
        3 * self.d_model
    }

    /// Total prunable mass of the dense model (attention + MLP weights
    /// over all blocks; embeddings, norms and the output head excluded).
    pub fn total_prunable(&self) -> usize {
        self.n_blocks * (4 * self.d_model * self.d_model + 3 * self.d_model * self.d_mlp)
    }
}

/// Per-block keep-vectors over heads and MLP channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredMask {
    pub blocks: Vec<BlockMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub heads: Vec<bool>,
    pub channels: Vec<bool>,
}

impl StructuredMask {
    /// All-true mask matching the blocks of a checkpoint's weights.
    pub fn all_true_for(weights: &Weights) -> Self {
        let blocks = weights
            .blocks
            .iter()
            .map(|b| BlockMask {
                heads: vec![true; b.n_heads],
                channels: vec![true; b.d_mlp],
            })
            .collect();
        StructuredMask { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if !b.heads.iter().any(|k| *k) {
                return Err(ModelError::MaskShape(format!(
                    "block {i} keeps no heads"
                )));
            }
            if !b.channels.iter().any(|k| *k) {
                return Err(ModelError::MaskShape(format!(
                    "block {i} keeps no channels"
                )));
            }
        }
        Ok(())
    }

    pub fn is_all_true(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.heads.iter().all(|k| *k) && b.channels.iter().all(|k| *k))
    }
}

/// Fraction of the dense model's prunable parameter mass that the mask
/// removes. Structures missing from the mask relative to `config`
/// (physically removed by surgery) count as removed too.
pub fn sparsity(mask: &StructuredMask, config: &ModelConfig) -> f64 {
    let mut removed = 0usize;
    for b in &mask.blocks {
        let gone_heads =
            config.n_heads - b.heads.len() + b.heads.iter().filter(|k| !**k).count();
        let gone_ch =
            config.d_mlp - b.channels.len() + b.channels.iter().filter(|k| !**k).count();
        removed += gone_heads * config.head_param_mass() + gone_ch * config.channel_param_mass();
    }
    removed as f64 / config.total_prunable() as f64
}

/// One transformer block's weights. Sizes may be smaller than the dense
/// config after surgery; `n_heads`/`d_mlp` are the block's actual dims.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub n_heads: usize,
    pub d_mlp: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub tok_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub out_proj: Tensor,
}

impl Weights {
    /// Canonical (name, tensor) walk used by checkpoint io, importance
    /// scoring and the optimizer. Order is fixed.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.w_up"), &b.w_up));
            out.push((format!("block{i}.w_gate"), &b.w_gate));
            out.push((format!("block{i}.w_down"), &b.w_down));
            out.push((format!("block{i}.attn_norm"), &b.attn_norm));
            out.push((format!("block{i}.mlp_norm"), &b.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("tok_emb".to_string(), &mut self.tok_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.wv"), &mut b.wv));
            out.push((format!("block{i}.wo"), &mut b.wo));
            out.push((format!("block{i}.w_up"), &mut b.w_up));
            out.push((format!("block{i}.w_gate"), &mut b.w_gate));
            out.push((format!("block{i}.w_down"), &mut b.w_down));
            out.push((format!("block{i}.attn_norm"), &mut b.attn_norm));
            out.push((format!("block{i}.mlp_norm"), &mut b.mlp_norm));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Run provenance carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// Sparsity milestone this checkpoint was pruned to (0 for dense).
    pub milestone_alpha: f64,
    /// Named seeds that produced this checkpoint.
    pub seeds: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub mask: StructuredMask,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Count of weights in the prunable set (attention + MLP matrices of
    /// every block, at their current physical sizes).
    pub fn prunable_params(&self) -> usize {
        self.weights
            .blocks
            .iter()
            .map(|b| {
                b.wq.len() + b.wk.len() + b.wv.len() + b.wo.len() + b.w_up.len()
                    + b.w_gate.len()
                    + b.w_down.len()
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn sparsity(&self) -> f64 {
        sparsity(&self.mask, &self.config)
    }
}

/// Initialize a dense model from a seeded scaled-normal draw. The same
/// seed yields bit-identical weights.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let d = config.d_model;
    let emb_dist = Normal::new(0.0, 0.02).expect("valid stddev");
    let lin_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid stddev");
    // Residual-feeding projections get an extra 1/sqrt(2·n_blocks).
    let res_scale = 1.0 / (2.0 * config.n_blocks as f64).sqrt();

    let mut draw = |shape: Vec<usize>, dist: &Normal<f64>, scale: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng) * scale).collect();
        Tensor::new(shape, data).expect("shape/data agree")
    };

    let tok_emb = draw(vec![config.vocab_size, d], &emb_dist, 1.0);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        blocks.push(BlockWeights {
            n_heads: config.n_heads,
            d_mlp: config.d_mlp,
            wq: draw(vec![d, d], &lin_dist, 1.0),
            wk: draw(vec![d, d], &lin_dist, 1.0),
            wv: draw(vec![d, d], &lin_dist, 1.0),
            wo: draw(vec![d, d], &lin_dist, res_scale),
            w_up: draw(vec![d, config.d_mlp], &lin_dist, 1.0),
            w_gate: draw(vec![d, config.d_mlp], &lin_dist, 1.0),
            w_down: draw(vec![config.d_mlp, d], &lin_dist, res_scale),
            attn_norm: Tensor::new(vec![d], vec![1.0; d]).expect("valid"),
            mlp_norm: Tensor::new(vec![d], vec![1.0; d]).expect("valid"),
        });
    }
    let final_norm = Tensor::new(vec![d], vec![1.0; d]).expect("valid");
    let out_proj = draw(vec![d, config.vocab_size], &lin_dist, 1.0);

    let weights = Weights {
        tok_emb,
        blocks,
        final_norm,
        out_proj,
    };
    let mask = StructuredMask::all_true_for(&weights);
    let mut seeds = std::collections::BTreeMap::new();
    seeds.insert("model".to_string(), config.rng_seed);
    Ok(Checkpoint {
        config: config.clone(),
        weights,
        mask,
        provenance: Provenance {
            milestone_alpha: 0.0,
            seeds,
        },
    })
}

#[cfg(test)]
mod tests;
