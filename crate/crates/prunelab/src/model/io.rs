//! Checkpoint container: structured-text header + raw fp64 payload.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    magic  b"PLABCKPT"
//! bytes 8..12   u32    format version (currently 1)
//! bytes 12..20  u64    header length H in bytes
//! bytes 20..20+H       JSON header: config, provenance, mask,
//!                      tensor manifest (name, shape, element offset/len)
//! remainder            concatenated f64 little-endian tensor payloads
//! ```
//!
//! Weights round-trip bit-exactly: reloading a checkpoint reproduces
//! identical forward logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{
    BlockWeights, Checkpoint, ModelConfig, ModelError, Provenance, Result, StructuredMask, Weights,
};

const MAGIC: &[u8; 8] = b"PLABCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: Provenance,
    mask: StructuredMask,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let named = ckpt.weights.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += t.len() as u64;
    }
    let header = Header {
        config: ckpt.config.clone(),
        provenance: ckpt.provenance.clone(),
        mask: ckpt.mask.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| ModelError::Format(e.to_string()))?;

    let mut by_name = std::collections::BTreeMap::new();
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(ModelError::Format(format!(
                "tensor {} at offset {}, expected {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.len {
            return Err(ModelError::Format(format!(
                "tensor {}: shape {:?} vs len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        by_name.insert(entry.name.clone(), t);
        expected_offset += entry.len;
    }

    let mut take = |name: &str| -> Result<Tensor> {
        by_name
            .remove(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))
    };

    let tok_emb = take("tok_emb")?;
    let mut blocks = Vec::with_capacity(header.config.n_blocks);
    for i in 0..header.config.n_blocks {
        let wq = take(&format!("block{i}.wq"))?;
        let wk = take(&format!("block{i}.wk"))?;
        let wv = take(&format!("block{i}.wv"))?;
        let wo = take(&format!("block{i}.wo"))?;
        let w_up = take(&format!("block{i}.w_up"))?;
        let w_gate = take(&format!("block{i}.w_gate"))?;
        let w_down = take(&format!("block{i}.w_down"))?;
        let attn_norm = take(&format!("block{i}.attn_norm"))?;
        let mlp_norm = take(&format!("block{i}.mlp_norm"))?;
        let n_heads = wq.shape()[1] / header.config.d_head;
        let d_mlp = w_up.shape()[1];
        blocks.push(BlockWeights {
            n_heads,
            d_mlp,
            wq,
            wk,
            wv,
            wo,
            w_up,
            w_gate,
            w_down,
            attn_norm,
            mlp_norm,
        });
    }
    let final_norm = take("final_norm")?;
    let out_proj = take("out_proj")?;
    if let Some(extra) = by_name.keys().next() {
        return Err(ModelError::Format(format!("unexpected tensor {extra}")));
    }

    let ckpt = Checkpoint {
        config: header.config,
        weights: Weights {
            tok_emb,
            blocks,
            final_norm,
            out_proj,
        },
        mask: header.mask,
        provenance: header.provenance,
    };
    ckpt.mask.validate()?;
    Ok(ckpt)
}
