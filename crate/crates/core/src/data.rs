//! Deterministic synthetic image-text pairs.
//!
//! Every sample has a hidden level `b_j ∈ [0, levels)` for each response
//! position `j`. Patch feature `j` is drawn around the level's bin center, so
//! every patch carries the answer. The response token at position `j` is
//! `response_base + j·levels + q_j`, where `q_j` quantizes the mean of feature
//! `j` over all patches. Instruction tokens are uniform over
//! `[0, instruction_vocab)` and carry no information.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sample};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Response tokens quantize per-feature patch means.
    PatchMeanLevels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub rule: Rule,
    pub instruction_len: usize,
    pub response_len: usize,
    /// Quantization bins per response position.
    pub levels: usize,
    /// Half-width of the uniform jitter around a bin center.
    pub noise: f64,
    /// Instruction ids come from `[0, instruction_vocab)`.
    pub instruction_vocab: usize,
    /// First response id; response ids fill `[base, base + response_len·levels)`.
    pub response_base: usize,
}

impl SyntheticSpec {
    pub fn text_len(&self) -> usize {
        self.instruction_len + self.response_len
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidSpec(msg));
        if self.n_samples == 0 || self.response_len == 0 || self.levels == 0 || self.instruction_vocab == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.response_len > model.patch_dim {
            return bad(format!(
                "response_len {} exceeds patch_dim {}: each response position reads one feature",
                self.response_len, model.patch_dim
            ));
        }
        if self.instruction_vocab > self.response_base {
            return bad("instruction ids must stay below response_base".into());
        }
        let top = self.response_base + self.response_len * self.levels;
        if top > model.vocab_size {
            return bad(format!("response ids reach {top} but vocab_size is {}", model.vocab_size));
        }
        if model.n_visual_tokens + self.text_len() > model.max_seq_len {
            return bad(format!(
                "n_visual_tokens + text length = {} exceeds max_seq_len {}",
                model.n_visual_tokens + self.text_len(),
                model.max_seq_len
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Ground-truth response for a patch buffer of `n` rows of width `patch_dim`.
    pub fn respond(&self, patches: &[f64], patch_dim: usize) -> Vec<usize> {
        let n = patches.len() / patch_dim;
        (0..self.response_len)
            .map(|j| {
                let mean = (0..n).map(|i| patches[i * patch_dim + j]).sum::<f64>() / n as f64;
                let q = (libm::floor(mean * self.levels as f64).max(0.0) as usize).min(self.levels - 1);
                self.response_base + j * self.levels + q
            })
            .collect()
    }
}

/// Sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(spec: &SyntheticSpec, model: &ModelConfig, seed: u64) -> Result<Vec<Sample>> {
    spec.validate(model)?;
    let (n, p) = (model.n_visual_tokens, model.patch_dim);
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut r = rng::keyed(seed, 0xda7a, i as u64);
            let centers: Vec<f64> = (0..spec.response_len)
                .map(|_| (r.gen_range(0..spec.levels) as f64 + 0.5) / spec.levels as f64)
                .collect();
            let mut patches = Vec::with_capacity(n * p);
            for _ in 0..n {
                for j in 0..p {
                    let v = match centers.get(j) {
                        Some(&c) if spec.noise > 0.0 => c + r.gen_range(-spec.noise..spec.noise),
                        Some(&c) => c,
                        None => r.gen_range(0.0..1.0),
                    };
                    patches.push(v);
                }
            }
            let instruction = (0..spec.instruction_len).map(|_| r.gen_range(0..spec.instruction_vocab)).collect();
            let response = spec.respond(&patches, p);
            Sample { patches, instruction, response }
        })
        .collect();
    Ok(samples)
}
