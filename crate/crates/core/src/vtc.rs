//! Visual token compression.
//!
//! A compressor picks one index set `I` over the `n` visual tokens and slices
//! `T_v[:, I, :]`. The same set is shared by every batch element so the output
//! stays rectangular. Three selection rules are provided:
//!
//! * uniform: every `s`-th token with stride `s = ⌊1/p⌋`;
//! * random: keep token `i` when an independent Bernoulli(`p`) draw succeeds;
//! * instruction-guided: keep the `⌊p·n⌋` tokens whose mean cosine similarity
//!   to the text tokens is highest.

use alloc::format;
use alloc::vec::Vec;

use rand::distributions::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    Random,
    InstructionGuided,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Random => "random",
            Strategy::InstructionGuided => "instruction-guided",
        }
    }
}

/// Strategy plus retention fraction `p ∈ (0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub strategy: Strategy,
    pub p: f64,
    /// Only consulted by [`Strategy::Random`].
    pub seed: u64,
}

impl CompressionSpec {
    pub fn new(strategy: Strategy, p: f64, seed: u64) -> Result<Self> {
        check_fraction(p)?;
        Ok(CompressionSpec { strategy, p, seed })
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.p)
    }
}

fn check_fraction(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidSpec(format!("retention fraction p must lie in (0, 1], got {p}")));
    }
    Ok(())
}

/// Strictly increasing, non-empty token positions below `source_length`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<usize>,
    source_length: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, source_length: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("index set must not be empty"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("indices must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last >= source_length {
                return Err(Error::Index { what: "token index", index: last, bound: source_length });
            }
        }
        Ok(IndexSet { indices, source_length })
    }

    /// Every position of an `n`-token stream.
    pub fn full(n: usize) -> Self {
        IndexSet { indices: (0..n).collect(), source_length: n }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    /// Fraction of the source actually kept.
    pub fn retention(&self) -> f64 {
        self.indices.len() as f64 / self.source_length as f64
    }
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSpec("token count must be at least 1".into()));
    }
    Ok(())
}

/// Stride `⌊1/p⌋` starting at 0. Keeps `⌈n/s⌉` tokens, which can exceed `p·n`.
pub fn uniform_indices(n: usize, p: f64) -> Result<IndexSet> {
    check_fraction(p)?;
    check_len(n)?;
    let stride = libm::floor(1.0 / p) as usize;
    let indices = (0..n).step_by(stride.max(1)).collect();
    IndexSet::new(indices, n)
}

/// One Bernoulli(`p`) draw per position from a ChaCha8 stream seeded by `seed`,
/// in index order. An empty draw keeps position 0.
pub fn random_indices(n: usize, p: f64, seed: u64) -> Result<IndexSet> {
    check_fraction(p)?;
    check_len(n)?;
    let coin = Bernoulli::new(p).map_err(|_| Error::InvalidSpec(format!("bad Bernoulli parameter {p}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).filter(|_| coin.sample(&mut rng)).collect();
    if indices.is_empty() {
        indices.push(0);
    }
    IndexSet::new(indices, n)
}

/// Mean over text tokens of the cosine similarity with each visual token.
///
/// `visual` is `[n×d]`, `text` is `[m×d]`.
pub fn instruction_scores(visual: &Tensor, text: &Tensor) -> Result<Vec<f64>> {
    let (sv, sx) = (visual.shape(), text.shape());
    if sv.rank() != 2 || sx.rank() != 2 || sv.last() != sx.last() {
        return Err(Error::Dimension { op: "instruction_scores", lhs: sv, rhs: sx });
    }
    let (n, m) = (sv.rows(), sx.rows());
    if n == 0 || m == 0 {
        return Err(Error::InvalidSpec("need at least one visual and one text token".into()));
    }
    let text_norms = row_norms(text)?;
    let visual_norms = row_norms(visual)?;
    let scores = (0..n)
        .map(|i| {
            let v = visual.row(i);
            let total: f64 = (0..m).map(|j| tensor::dot(v, text.row(j)) / (visual_norms[i] * text_norms[j])).sum();
            total / m as f64
        })
        .collect();
    Ok(scores)
}

fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    (0..t.shape().rows())
        .map(|r| {
            let row = t.row(r);
            let norm = libm::sqrt(tensor::dot(row, row));
            if norm == 0.0 {
                Err(Error::Numeric("zero-norm token: cosine similarity undefined"))
            } else {
                Ok(norm)
            }
        })
        .collect()
}

/// Keeps the `max(1, ⌊p·n⌋)` highest scores, lower index first on ties,
/// returned in ascending position order.
pub fn top_fraction(scores: &[f64], p: f64) -> Result<IndexSet> {
    check_fraction(p)?;
    let n = scores.len();
    check_len(n)?;
    let k = (libm::floor(p * n as f64) as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the lower index ahead on equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    IndexSet::new(kept, n)
}

pub fn instruction_indices(visual: &Tensor, text: &Tensor, p: f64) -> Result<IndexSet> {
    check_fraction(p)?;
    let scores = instruction_scores(visual, text)?;
    top_fraction(&scores, p)
}

/// Batched variant: `visual` is `[b×n×d]`, `texts[i]` is the `[mᵢ×d]` text of
/// element `i`. Scores are averaged over the batch before selection.
pub fn instruction_indices_batched(visual: &Tensor, texts: &[Tensor], p: f64) -> Result<IndexSet> {
    check_fraction(p)?;
    let s = visual.shape();
    if s.rank() != 3 || s.dims()[0] != texts.len() {
        return Err(Error::Contract("one text tensor per batch element required"));
    }
    let (b, n, d) = (s.dims()[0], s.dims()[1], s.dims()[2]);
    let mut mean = alloc::vec![0.0; n];
    for (bi, text) in texts.iter().enumerate() {
        let slice = visual.values()[bi * n * d..(bi + 1) * n * d].to_vec();
        let sample = Tensor::from_vec(&[n, d], slice)?;
        for (acc, sc) in mean.iter_mut().zip(instruction_scores(&sample, text)?) {
            *acc += sc;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    top_fraction(&mean, p)
}

/// `T_v[:, I, :]` recorded on the tape; dropped positions get zero gradient.
pub fn compress(tape: &mut Tape, visual: TensorId, idx: &IndexSet) -> Result<TensorId> {
    let s = tape.shape(visual);
    if s.rank() != 3 || s.dims()[1] != idx.source_length() {
        return Err(Error::Contract("index set source length must equal the token axis length"));
    }
    tape.gather_tokens(visual, idx.indices())
}
