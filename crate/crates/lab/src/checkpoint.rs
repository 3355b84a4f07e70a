//! Binary model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "STSCKPT\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      64    ModelConfig as eight u64 LE: d_model, n_layers, n_heads, d_ff,
//!               vocab_size, n_visual_tokens, max_seq_len, patch_dim
//! 76      8     number of parameter values N, u64 LE
//! 84      8·N   parameter values, f64 LE, tensors in canonical order
//! ```
//!
//! Canonical order is encoder weight and bias, projector weight and bias,
//! token and position embeddings, then per decoder layer `ln1 gain/bias, Wq,
//! bq, Wk, bk, Wv, bv, Wo, bo, ln2 gain/bias, W1, b1, W2, b2`, then the final
//! layer norm gain/bias and the head weight and bias. Matrices are row-major.

use std::path::Path;

use sts_core::model::{parameter_shapes, Mllm, ModelConfig};
use sts_core::Tensor;

use crate::LabError;

pub const MAGIC: &[u8; 8] = b"STSCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 8 + 8;

fn fields(c: &ModelConfig) -> [usize; 8] {
    [c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.n_visual_tokens, c.max_seq_len, c.patch_dim]
}

pub fn to_bytes(model: &Mllm) -> Vec<u8> {
    let n: usize = model.param_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in fields(model.config()) {
        out.extend_from_slice(&(f as u64).to_le_bytes());
    }
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for t in model.parameters() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

fn u64_at(bytes: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8-byte slice"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Mllm, LabError> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic or truncated header)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let f: Vec<usize> = (0..8).map(|i| u64_at(bytes, 12 + 8 * i) as usize).collect();
    let config = ModelConfig {
        d_model: f[0],
        n_layers: f[1],
        n_heads: f[2],
        d_ff: f[3],
        vocab_size: f[4],
        n_visual_tokens: f[5],
        max_seq_len: f[6],
        patch_dim: f[7],
    };
    config.validate().map_err(|e| bad(format!("invalid model config: {e}")))?;
    let n = u64_at(bytes, 76) as usize;
    let shapes = parameter_shapes(&config);
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if n != expected {
        return Err(bad(format!("parameter count {n} does not match the config ({expected})")));
    }
    if bytes.len() != HEADER_LEN + 8 * n {
        return Err(bad(format!("expected {} bytes, found {}", HEADER_LEN + 8 * n, bytes.len())));
    }
    let mut values =
        bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = shapes
        .iter()
        .map(|dims| {
            let len = dims.iter().product();
            Tensor::from_vec(dims, values.by_ref().take(len).collect())
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Mllm::from_tensors(config, tensors).map_err(|e| bad(e.to_string()))
}

pub fn save(path: &Path, model: &Mllm) -> Result<(), LabError> {
    std::fs::write(path, to_bytes(model)).map_err(|source| LabError::Write { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<Mllm, LabError> {
    let bytes = std::fs::read(path).map_err(|source| LabError::Read { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}
