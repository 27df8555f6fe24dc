//! Checkpoint format:
//!
//! ```text
//! moduleformer-checkpoint v1
//! header-bytes <n>
//! <n bytes of JSON header>
//! <payload: little-endian f64, row-major, in manifest order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{MoaLayer, StickBreakingHead};
use crate::error::{Error, Result};
use crate::moe::{FfdExpert, Router, SmoeLayer, UsageStats};
use crate::numerics::Tensor;

use super::{Block, BlockLayout, Model, ModuleFormerConfig, Norm};

pub const CHECKPOINT_MAGIC: &str = "moduleformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModuleFormerConfig,
    blocks: Vec<BlockLayout>,
    step: u64,
    tokens_seen: u64,
    usage: Option<UsageStats>,
    tensors: Vec<ManifestEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (name, t) in model.params() {
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            trainable: t.requires_grad,
        });
        offset += t.numel() * 8;
    }
    let header = Header {
        config: model.config.clone(),
        blocks: model.layouts(),
        step: model.step,
        tokens_seen: model.tokens_seen,
        usage: model.usage.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| ckpt_err(format!("encoding header: {e}")))?;
    let mut bytes = Vec::with_capacity(json.len() + offset + 64);
    write!(bytes, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\nheader-bytes {}\n", json.len()).expect("vec write");
    bytes.extend_from_slice(&json);
    for (_, t) in model.params() {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ckpt_err("truncated preamble"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| ckpt_err("preamble is not text"))
}

/// Model with the right structure for `layouts`, every tensor zeroed.
fn skeleton(config: ModuleFormerConfig, layouts: &[BlockLayout]) -> Result<Model> {
    config.validate()?;
    if layouts.len() != config.n_layer {
        return Err(ckpt_err(format!(
            "{} block layouts for n_layer = {}",
            layouts.len(),
            config.n_layer
        )));
    }
    let (d, r) = (config.d_emb, config.d_rtr);
    let router = |n: usize, ext: usize| -> Result<Router> {
        if ext > n || n == ext {
            return Err(ckpt_err(format!("{ext} inserted rows in a router of {n}")));
        }
        Ok(Router {
            a: Tensor::zeros(&[n - ext, r]),
            b: Tensor::zeros(&[d, r]),
            a_ext: (ext > 0).then(|| Tensor::zeros(&[ext, r])),
        })
    };
    let mut blocks = Vec::with_capacity(layouts.len());
    for lay in layouts {
        if lay.n_heads < config.k_att || lay.n_experts < config.k_ffd {
            return Err(ckpt_err(format!("block layout {lay:?} has fewer modules than top-k")));
        }
        blocks.push(Block {
            ln_att: Norm {
                gain: Tensor::zeros(&[d]),
                bias: Tensor::zeros(&[d]),
            },
            moa: MoaLayer {
                router: router(lay.n_heads, lay.head_ext_rows)?,
                w_k: Tensor::zeros(&[d, config.d_att]),
                w_v: Tensor::zeros(&[d, config.d_att]),
                heads: (0..lay.n_heads)
                    .map(|_| StickBreakingHead {
                        w_q: Tensor::zeros(&[d, config.d_att]),
                        w_o: Tensor::zeros(&[config.d_att, d]),
                    })
                    .collect(),
                top_k: config.k_att,
            },
            ln_ffd: Norm {
                gain: Tensor::zeros(&[d]),
                bias: Tensor::zeros(&[d]),
            },
            smoe: SmoeLayer {
                router: router(lay.n_experts, lay.expert_ext_rows)?,
                experts: (0..lay.n_experts)
                    .map(|_| FfdExpert {
                        w_in: Tensor::zeros(&[d, config.d_ffd]),
                        w_out: Tensor::zeros(&[config.d_ffd, d]),
                    })
                    .collect(),
                top_k: config.k_ffd,
            },
        });
    }
    Ok(Model {
        embedding: Tensor::zeros(&[config.vocab_size, d]),
        blocks,
        ln_f: Norm {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        },
        lm_head: Tensor::zeros(&[d, config.vocab_size]),
        step: 0,
        tokens_seen: 0,
        usage: None,
        config,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = take_line(&bytes, &mut pos)?;
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().strip_prefix('v'))
        .ok_or_else(|| ckpt_err("not a moduleformer checkpoint"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(ckpt_err(format!(
            "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len: usize = take_line(&bytes, &mut pos)?
        .strip_prefix("header-bytes ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ckpt_err("missing header length"))?;
    let header_bytes = bytes
        .get(pos..pos + len)
        .ok_or_else(|| ckpt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| ckpt_err(format!("malformed header: {e}")))?;
    let payload = &bytes[pos + len..];

    let mut model = skeleton(header.config, &header.blocks)?;
    model.step = header.step;
    model.tokens_seen = header.tokens_seen;
    model.usage = header.usage;
    if let Some(u) = &model.usage {
        if u.layers.len() != model.blocks.len()
            || u.layers.iter().zip(&model.blocks).any(|(l, b)| l.counts.len() != b.smoe.experts.len())
        {
            return Err(ckpt_err("usage snapshot does not match expert counts"));
        }
    }

    let mut params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(ckpt_err(format!(
            "manifest lists {} tensors, structure needs {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let mut expected_offset = 0;
    for ((name, t), entry) in params.iter_mut().zip(&header.tensors) {
        if *name != entry.name {
            return Err(ckpt_err(format!("manifest entry {} where {name} expected", entry.name)));
        }
        if t.shape() != entry.shape.as_slice() {
            return Err(ckpt_err(format!(
                "shape mismatch for {name}: manifest {:?}, config {:?}",
                entry.shape,
                t.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(ckpt_err(format!("offset of {name} is {}, expected {expected_offset}", entry.offset)));
        }
        let n = t.numel();
        let raw = payload
            .get(entry.offset..entry.offset + n * 8)
            .ok_or_else(|| ckpt_err(format!("truncated payload at {name}")))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        t.requires_grad = entry.trainable;
        expected_offset += n * 8;
    }
    if payload.len() != expected_offset {
        return Err(ckpt_err(format!(
            "payload has {} bytes, manifest covers {expected_offset}",
            payload.len()
        )));
    }
    drop(params);
    Ok(model)
}
