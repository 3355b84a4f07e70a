#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sts_core::model::{Batch, Mllm, ModelConfig, ParamGroup, Sample};
use sts_core::{Result, SkipMask, Tape, Tensor, TensorId};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between backprop and central differences over every
/// element of every leaf.
pub fn grad_check<F>(leaves: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves.into_iter().map(|t| tape.param(t.requiring_grad()).unwrap()).collect();
    let root = f(&mut tape, &ids).unwrap();
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (li, &id) in ids.iter().enumerate() {
        for (k, &a) in analytic[li].iter().enumerate() {
            let mut eval = |delta: f64| {
                tape.reset();
                tape.tensor_mut(id).values_mut()[k] += delta;
                let root = f(&mut tape, &ids).unwrap();
                let v = tape.value(root)[0];
                tape.reset();
                tape.tensor_mut(id).values_mut()[k] -= delta;
                v
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        n_visual_tokens: 8,
        max_seq_len: 16,
        patch_dim: 6,
    }
}

pub fn toy_batch(cfg: &ModelConfig, b: usize, instr: usize, resp: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let samples: Vec<Sample> = (0..b)
        .map(|_| Sample {
            patches: (0..cfg.n_visual_tokens * cfg.patch_dim).map(|_| r.gen_range(0.0..1.0)).collect(),
            instruction: (0..instr).map(|_| r.gen_range(0..cfg.vocab_size)).collect(),
            response: (0..resp).map(|_| r.gen_range(0..cfg.vocab_size)).collect(),
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::from_samples(&refs, cfg.n_visual_tokens, cfg.patch_dim).unwrap()
}

/// Replaces every parameter with O(1) uniform noise so gradients are not tiny.
pub fn scramble(model: &mut Mllm, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<TensorId> = model.param_ids().collect();
    for id in ids {
        for v in model.tape_mut().tensor_mut(id).values_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
    }
}

pub fn loss_of(model: &mut Mllm, batch: &Batch, mask: Option<&SkipMask>) -> TensorId {
    model.reset();
    let z = model.encode_image(&batch.visual_features).unwrap();
    let t = model.project(z).unwrap();
    let logits = model.forward(batch, t, mask).unwrap();
    model.loss(logits, batch).unwrap()
}

pub fn logits_of(model: &mut Mllm, batch: &Batch, mask: Option<&SkipMask>) -> Vec<f64> {
    model.reset();
    let z = model.encode_image(&batch.visual_features).unwrap();
    let t = model.project(z).unwrap();
    let logits = model.forward(batch, t, mask).unwrap();
    model.tape().value(logits).to_vec()
}

/// Max relative error of the full model's gradient against central
/// differences, with every group (the encoder included) made trainable.
pub fn model_grad_check(model: &mut Mllm, batch: &Batch, mask: Option<&SkipMask>) -> f64 {
    for g in ParamGroup::ALL {
        model.set_group_trainable(g, true);
    }
    model.zero_grad();
    let root = loss_of(model, batch, mask);
    model.backward(root).unwrap();
    let ids: Vec<TensorId> = model.param_ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| model.tape().grad(id).to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (pi, &id) in ids.iter().enumerate() {
        for (k, &a) in analytic[pi].iter().enumerate() {
            let mut eval = |delta: f64| {
                model.reset();
                model.tape_mut().tensor_mut(id).values_mut()[k] += delta;
                let root = loss_of(model, batch, mask);
                let v = model.tape().value(root)[0];
                model.reset();
                model.tape_mut().tensor_mut(id).values_mut()[k] -= delta;
                v
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
