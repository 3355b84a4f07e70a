//! Toy multimodal model: a frozen random vision featurizer, a trainable
//! projector into the language model's embedding space, and a pre-norm
//! decoder-only transformer whose blocks can be bypassed by a [`SkipMask`].
//!
//! Sequence layout is `[visual tokens | instruction | response]`; logits at
//! position `t` predict the token at `t + 1`, and only response tokens are
//! scored.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::SkipMask;
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_visual_tokens: usize,
    pub max_seq_len: usize,
    pub patch_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_visual_tokens", self.n_visual_tokens),
            ("patch_dim", self.patch_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidSpec(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < self.n_visual_tokens + 2 {
            return Err(Error::InvalidSpec(format!(
                "max_seq_len {} must be at least n_visual_tokens + 2 = {}",
                self.max_seq_len,
                self.n_visual_tokens + 2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Alignment,
    FineTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Alignment => "alignment",
            Stage::FineTune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    VisionEncoder,
    Projector,
    /// Token and position embeddings.
    Embeddings,
    Decoder,
    /// Final layer norm and vocabulary projection.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::VisionEncoder,
        ParamGroup::Projector,
        ParamGroup::Embeddings,
        ParamGroup::Decoder,
        ParamGroup::Head,
    ];
}

/// One training example: raw patch features, instruction ids, response ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Vec<f64>,
    pub instruction: Vec<usize>,
    pub response: Vec<usize>,
}

/// A rectangular batch. Every element shares instruction and response lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b×n×patch_dim]`
    pub visual_features: Tensor,
    pub instruction_ids: Vec<Vec<usize>>,
    pub response_ids: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], n_visual: usize, patch_dim: usize) -> Result<Self> {
        let first = samples.first().ok_or(Error::Contract("empty batch"))?;
        let (il, rl) = (first.instruction.len(), first.response.len());
        let mut feats = Vec::with_capacity(samples.len() * n_visual * patch_dim);
        for s in samples {
            if s.instruction.len() != il || s.response.len() != rl {
                return Err(Error::Contract("batch elements must share text lengths"));
            }
            if s.patches.len() != n_visual * patch_dim {
                return Err(Error::Contract("sample patch buffer has the wrong length"));
            }
            feats.extend_from_slice(&s.patches);
        }
        Ok(Batch {
            visual_features: Tensor::from_vec(&[samples.len(), n_visual, patch_dim], feats)?,
            instruction_ids: samples.iter().map(|s| s.instruction.clone()).collect(),
            response_ids: samples.iter().map(|s| s.response.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.instruction_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instruction_ids.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.instruction_ids.first().map_or(0, Vec::len) + self.response_ids.first().map_or(0, Vec::len)
    }

    /// Instruction followed by response, for every element.
    pub fn text_ids(&self) -> Vec<usize> {
        self.instruction_ids
            .iter()
            .zip(&self.response_ids)
            .flat_map(|(i, r)| i.iter().chain(r.iter()).copied())
            .collect()
    }

    /// Next-token targets and the loss mask over all `b·(n_visual + text)`
    /// positions. The mask is true exactly where the target is a response token.
    pub fn targets_and_mask(&self, n_visual: usize) -> (Vec<usize>, Vec<bool>) {
        let il = self.instruction_ids.first().map_or(0, Vec::len);
        let seq = n_visual + self.text_len();
        let mut targets = Vec::with_capacity(self.len() * seq);
        let mut mask = Vec::with_capacity(self.len() * seq);
        for (ins, res) in self.instruction_ids.iter().zip(&self.response_ids) {
            for t in 0..seq {
                let next = t + 1;
                if next >= n_visual + il && next < seq {
                    targets.push(res[next - n_visual - il]);
                    mask.push(true);
                } else if next >= n_visual && next < n_visual + il {
                    targets.push(ins[next - n_visual]);
                    mask.push(false);
                } else {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        (targets, mask)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerParams {
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

const PARAMS_PER_LAYER: usize = 16;

/// How a parameter is initialized.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

/// The model owns its tape; parameters are the tape's persistent leaves.
#[derive(Clone, Debug)]
pub struct Mllm {
    config: ModelConfig,
    tape: Tape,
    ids: Vec<TensorId>,
    groups: Vec<ParamGroup>,
    enc_w: TensorId,
    enc_b: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    tok_emb: TensorId,
    pos_emb: TensorId,
    layers: Vec<LayerParams>,
    lnf_g: TensorId,
    lnf_b: TensorId,
    head_w: TensorId,
    head_b: TensorId,
}

/// Shapes of every parameter in canonical (checkpoint) order.
pub fn parameter_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    layout(c).into_iter().map(|(dims, _, _)| dims).collect()
}

/// Canonical parameter order, shapes, groups and initializers.
fn layout(c: &ModelConfig) -> Vec<(Vec<usize>, ParamGroup, Init)> {
    use ParamGroup::*;
    let (d, f, p, v) = (c.d_model, c.d_ff, c.patch_dim, c.vocab_size);
    let enc_std = 1.0 / libm::sqrt(p as f64);
    let mut out = alloc::vec![
        (alloc::vec![p, p], VisionEncoder, Init::Uniform(enc_std)),
        (alloc::vec![p], VisionEncoder, Init::Uniform(0.1)),
        (alloc::vec![p, d], Projector, Init::Uniform(INIT_STD)),
        (alloc::vec![d], Projector, Init::Zeros),
        (alloc::vec![v, d], Embeddings, Init::Uniform(INIT_STD)),
        (alloc::vec![c.max_seq_len, d], Embeddings, Init::Uniform(INIT_STD)),
    ];
    for _ in 0..c.n_layers {
        out.extend([
            (alloc::vec![d], Decoder, Init::Ones),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d, d], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d, d], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d, d], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d, d], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d], Decoder, Init::Ones),
            (alloc::vec![d], Decoder, Init::Zeros),
            (alloc::vec![d, f], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![f], Decoder, Init::Zeros),
            (alloc::vec![f, d], Decoder, Init::Uniform(INIT_STD)),
            (alloc::vec![d], Decoder, Init::Zeros),
        ]);
    }
    out.extend([
        (alloc::vec![d], Head, Init::Ones),
        (alloc::vec![d], Head, Init::Zeros),
        (alloc::vec![d, v], Head, Init::Uniform(INIT_STD)),
        (alloc::vec![v], Head, Init::Zeros),
    ]);
    out
}

impl Mllm {
    /// Fresh model with parameters drawn from a ChaCha8 stream keyed by `seed`.
    /// The vision encoder starts frozen; everything else is trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, 0x1417));
        let tensors = layout(&config)
            .into_iter()
            .map(|(dims, _, init)| {
                let n: usize = dims.iter().product();
                let values = match init {
                    Init::Zeros => alloc::vec![0.0; n],
                    Init::Ones => alloc::vec![1.0; n],
                    Init::Uniform(std) => {
                        let a = std * libm::sqrt(3.0);
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                };
                Tensor::from_vec(&dims, values)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds a model from parameter tensors in canonical order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let spec = layout(&config);
        if spec.len() != tensors.len() {
            return Err(Error::Contract("parameter count does not match the model layout"));
        }
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(spec.len());
        let mut groups = Vec::with_capacity(spec.len());
        for ((dims, group, _), mut t) in spec.into_iter().zip(tensors) {
            if t.dims() != dims.as_slice() {
                return Err(Error::Dimension {
                    op: "load parameter",
                    lhs: Tensor::zeros(&dims)?.shape(),
                    rhs: t.shape(),
                });
            }
            t.set_requires_grad(group != ParamGroup::VisionEncoder);
            t.zero_grad();
            ids.push(tape.param(t)?);
            groups.push(group);
        }
        let layers = (0..config.n_layers)
            .map(|l| {
                let b = &ids[6 + l * PARAMS_PER_LAYER..6 + (l + 1) * PARAMS_PER_LAYER];
                LayerParams {
                    ln1_g: b[0],
                    ln1_b: b[1],
                    wq: b[2],
                    bq: b[3],
                    wk: b[4],
                    bk: b[5],
                    wv: b[6],
                    bv: b[7],
                    wo: b[8],
                    bo: b[9],
                    ln2_g: b[10],
                    ln2_b: b[11],
                    w1: b[12],
                    b1: b[13],
                    w2: b[14],
                    b2: b[15],
                }
            })
            .collect();
        let tail = 6 + config.n_layers * PARAMS_PER_LAYER;
        Ok(Mllm {
            config,
            tape,
            groups,
            enc_w: ids[0],
            enc_b: ids[1],
            proj_w: ids[2],
            proj_b: ids[3],
            tok_emb: ids[4],
            pos_emb: ids[5],
            layers,
            lnf_g: ids[tail],
            lnf_b: ids[tail + 1],
            head_w: ids[tail + 2],
            head_b: ids[tail + 3],
            ids,
        })
    }

    /// The same parameters with decoder layer `k` physically removed.
    pub fn without_layer(&self, k: usize) -> Result<Self> {
        if k >= self.config.n_layers {
            return Err(Error::Range { what: "layer", value: k, max: self.config.n_layers.saturating_sub(1) });
        }
        let start = 6 + k * PARAMS_PER_LAYER;
        let tensors = self
            .parameters()
            .enumerate()
            .filter(|(i, _)| !(start..start + PARAMS_PER_LAYER).contains(i))
            .map(|(_, t)| t.clone())
            .collect();
        let mut config = self.config;
        config.n_layers -= 1;
        let mut m = Self::from_tensors(config, tensors)?;
        for (i, id) in m.tape.param_ids().collect::<Vec<_>>().into_iter().enumerate() {
            let src = if i < start { i } else { i + PARAMS_PER_LAYER };
            let rg = self.tape.tensor(self.ids[src]).requires_grad();
            m.tape.tensor_mut(id).set_requires_grad(rg);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.tape.param_ids().map(move |id| self.tape.tensor(id))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = TensorId> {
        self.tape.param_ids()
    }

    pub fn group_of(&self, id: TensorId) -> ParamGroup {
        self.groups[id.index()]
    }

    pub fn param_count(&self) -> usize {
        self.parameters().map(Tensor::numel).sum()
    }

    /// Parameter ids belonging to decoder layer `l`.
    pub fn layer_param_ids(&self, l: usize) -> Vec<TensorId> {
        let start = 6 + l * PARAMS_PER_LAYER;
        self.ids[start..start + PARAMS_PER_LAYER].to_vec()
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, on: bool) {
        for id in self.tape.param_ids().collect::<Vec<_>>() {
            if self.groups[id.index()] == group {
                self.tape.tensor_mut(id).set_requires_grad(on);
            }
        }
    }

    pub fn is_trainable(&self, id: TensorId) -> bool {
        self.tape.tensor(id).requires_grad()
    }

    /// Alignment trains only the projector; fine-tuning trains everything but
    /// the vision encoder.
    pub fn set_stage_freezing(&mut self, stage: Stage) {
        for g in ParamGroup::ALL {
            let on = match (stage, g) {
                (_, ParamGroup::VisionEncoder) => false,
                (_, ParamGroup::Projector) => true,
                (Stage::Alignment, _) => false,
                (Stage::FineTune, _) => true,
            };
            self.set_group_trainable(g, on);
        }
    }

    /// Drops everything recorded since the last reset.
    pub fn reset(&mut self) {
        self.tape.reset();
    }

    pub fn zero_grad(&mut self) {
        self.tape.zero_grad();
    }

    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        self.tape.backward(root)
    }

    // ── forward pieces ───────────────────────────────────────────────

    /// Frozen featurizer `gelu(x·G + g)` standing in for a pretrained encoder.
    pub fn encode_image(&mut self, x: &Tensor) -> Result<TensorId> {
        let c = self.config;
        let s = x.shape();
        if s.rank() != 3 || s.dims()[1] != c.n_visual_tokens || s.dims()[2] != c.patch_dim {
            return Err(Error::Dimension { op: "encode_image", lhs: s, rhs: self.tape.shape(self.enc_w) });
        }
        let mut input = x.clone();
        input.set_requires_grad(false);
        input.zero_grad();
        let xin = self.tape.input(input);
        let h = self.tape.matmul(xin, self.enc_w)?;
        let h = self.tape.add_bias(h, self.enc_b)?;
        Ok(self.tape.gelu(h))
    }

    /// Affine projection into the embedding space.
    pub fn project(&mut self, z: TensorId) -> Result<TensorId> {
        let h = self.tape.matmul(z, self.proj_w)?;
        self.tape.add_bias(h, self.proj_b)
    }

    /// Rows of the token embedding table, detached.
    pub fn token_embeddings(&self, ids: &[usize]) -> Result<Tensor> {
        let table = self.tape.tensor(self.tok_emb);
        let d = self.config.d_model;
        let mut rows = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::Index { what: "token id", index: id, bound: self.config.vocab_size });
            }
            rows.extend_from_slice(table.row(id));
        }
        Tensor::from_vec(&[ids.len(), d], rows)
    }

    /// `[visual | instruction | response]` plus position embeddings: the
    /// residual stream entering the first decoder block.
    pub fn embed_stream(&mut self, batch: &Batch, visual_tokens: TensorId) -> Result<TensorId> {
        let c = self.config;
        let vs = self.tape.shape(visual_tokens);
        let b = batch.len();
        if vs.rank() != 3 || vs.dims()[0] != b || vs.dims()[2] != c.d_model || vs.dims()[1] > c.n_visual_tokens {
            return Err(Error::Contract("visual tokens must be [b×n'×d_model] with n' <= n_visual_tokens"));
        }
        let t = batch.text_len();
        let seq = vs.dims()[1] + t;
        if seq > c.max_seq_len {
            return Err(Error::SequenceLength { len: seq, max: c.max_seq_len });
        }
        let text = self.tape.embedding(self.tok_emb, &batch.text_ids())?;
        let text = self.tape.reshape(text, &[b, t, c.d_model])?;
        let x = self.tape.concat_seq(&[visual_tokens, text])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pos = self.tape.embedding(self.pos_emb, &positions)?;
        let pos = self.tape.reshape(pos, &[b, seq, c.d_model])?;
        self.tape.add(x, pos)
    }

    fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let h = self.tape.matmul(x, w)?;
        self.tape.add_bias(h, b)
    }

    /// One pre-norm block: `x + attn(ln(x))`, then `+ mlp(ln(·))`.
    pub fn block(&mut self, l: usize, x: TensorId) -> Result<TensorId> {
        let p = self.layers[l];
        let h = self.tape.layer_norm(x, p.ln1_g, p.ln1_b, LAYER_NORM_EPS)?;
        let q = self.linear(h, p.wq, p.bq)?;
        let k = self.linear(h, p.wk, p.bk)?;
        let v = self.linear(h, p.wv, p.bv)?;
        let a = self.tape.causal_attention(q, k, v, self.config.n_heads)?;
        let o = self.linear(a, p.wo, p.bo)?;
        let x = self.tape.add(x, o)?;
        let h = self.tape.layer_norm(x, p.ln2_g, p.ln2_b, LAYER_NORM_EPS)?;
        let f = self.linear(h, p.w1, p.b1)?;
        let f = self.tape.gelu(f);
        let f = self.linear(f, p.w2, p.b2)?;
        self.tape.add(x, f)
    }

    /// Final layer norm and vocabulary projection.
    pub fn output_head(&mut self, x: TensorId) -> Result<TensorId> {
        let h = self.tape.layer_norm(x, self.lnf_g, self.lnf_b, LAYER_NORM_EPS)?;
        self.linear(h, self.head_w, self.head_b)
    }

    /// Logits `[b×seq×V]`. A set gate bypasses its block so the residual
    /// stream passes through unchanged.
    pub fn forward(&mut self, batch: &Batch, visual_tokens: TensorId, mask: Option<&SkipMask>) -> Result<TensorId> {
        if let Some(m) = mask {
            if m.gates.len() != self.config.n_layers {
                return Err(Error::Contract("skip mask length must equal the number of layers"));
            }
        }
        let mut x = self.embed_stream(batch, visual_tokens)?;
        for l in 0..self.config.n_layers {
            if mask.is_some_and(|m| m.gates[l]) {
                continue;
            }
            x = self.block(l, x)?;
        }
        self.output_head(x)
    }

    /// Mean next-token cross-entropy over response positions.
    pub fn loss(&mut self, logits: TensorId, batch: &Batch) -> Result<TensorId> {
        let s = self.tape.shape(logits);
        let t = batch.text_len();
        if s.rank() != 3 || s.dims()[0] != batch.len() || s.dims()[1] < t || s.last() != self.config.vocab_size {
            return Err(Error::Contract("logits do not match the batch"));
        }
        if batch.response_ids.first().is_none_or(Vec::is_empty) {
            return Err(Error::DegenerateLoss);
        }
        let n_visual = s.dims()[1] - t;
        let (targets, mask) = batch.targets_and_mask(n_visual);
        let ignore: Vec<bool> = mask.iter().map(|&m| !m).collect();
        self.tape.cross_entropy(logits, &targets, &ignore)
    }
}
