//! Two-stage training: modality alignment (projector only, token compression)
//! followed by instruction fine-tuning (everything but the encoder, layer
//! skipping). Each stage is one epoch over the synthetic dataset.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Rule, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flops::{CostModel, RunFlops, StagePlan, StepTrace};
use crate::lds::{self, SkipMask, SkipSchedule};
use crate::model::{Batch, Mllm, ModelConfig, ParamGroup, Sample, Stage};
use crate::rng;
use crate::tape::TensorId;
use crate::vtc::{self, CompressionSpec, IndexSet, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps_adam: 1e-8 }
    }
}

/// Stages an arm is active in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet {
    pub alignment: bool,
    pub finetune: bool,
}

impl StageSet {
    pub const ALIGNMENT: StageSet = StageSet { alignment: true, finetune: false };
    pub const FINETUNE: StageSet = StageSet { alignment: false, finetune: true };

    pub fn contains(&self, stage: Stage) -> bool {
        match stage {
            Stage::Alignment => self.alignment,
            Stage::FineTune => self.finetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Sts,
    VtcOnly,
    LdsOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Sts, Mode::VtcOnly, Mode::LdsOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Sts => "sts",
            Mode::VtcOnly => "vtc-only",
            Mode::LdsOnly => "lds-only",
        }
    }

    fn uses_vtc(self) -> bool {
        matches!(self, Mode::Sts | Mode::VtcOnly)
    }

    fn uses_lds(self) -> bool {
        matches!(self, Mode::Sts | Mode::LdsOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub vtc: Option<CompressionSpec>,
    /// `total_steps` must equal the fine-tune step count.
    pub lds: Option<SkipSchedule>,
    pub vtc_stages: StageSet,
    pub lds_stages: StageSet,
    /// Permits compression in fine-tuning or skipping in alignment.
    pub allow_cross_stage: bool,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub dataset: SyntheticSpec,
}

impl TrainConfig {
    /// The desk-scale reference configuration.
    pub fn desk_default() -> Self {
        let dataset = SyntheticSpec {
            n_samples: 4000,
            rule: Rule::PatchMeanLevels,
            instruction_len: 32,
            response_len: 8,
            levels: 4,
            noise: 0.1,
            instruction_vocab: 32,
            response_base: 32,
        };
        let model = ModelConfig {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            n_visual_tokens: 32,
            max_seq_len: 72,
            patch_dim: 16,
        };
        let batch_size = 8;
        let e2 = dataset.n_samples.div_ceil(batch_size);
        TrainConfig {
            model,
            vtc: Some(CompressionSpec { strategy: Strategy::Uniform, p: 0.5, seed: 0 }),
            lds: Some(SkipSchedule { alpha: 0.5, epsilon: 0.5, total_steps: e2, num_layers: model.n_layers }),
            vtc_stages: StageSet::ALIGNMENT,
            lds_stages: StageSet::FINETUNE,
            allow_cross_stage: false,
            batch_size,
            optimizer: AdamConfig::default(),
            seed: 0,
            dataset,
        }
    }

    /// One epoch per stage.
    pub fn stage_steps(&self) -> (usize, usize) {
        let e = self.dataset.n_samples.div_ceil(self.batch_size.max(1));
        (e, e)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate(&self.model)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        if let Some(v) = &self.vtc {
            v.validate()?;
        }
        if let Some(s) = &self.lds {
            s.validate()?;
            let (_, e2) = self.stage_steps();
            if s.total_steps != e2 {
                return Err(Error::InvalidSpec(format!(
                    "lds total_steps {} must equal the fine-tune step count {e2}",
                    s.total_steps
                )));
            }
            if s.num_layers != self.model.n_layers {
                return Err(Error::InvalidSpec("lds num_layers must equal model n_layers".into()));
            }
        }
        if !self.allow_cross_stage && (self.vtc_stages.finetune || self.lds_stages.alignment) {
            return Err(Error::InvalidSpec(
                "compression in fine-tuning or skipping in alignment needs allow_cross_stage".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps_adam > 0.0)
        {
            return Err(Error::InvalidSpec("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel { model: self.model, batch_size: self.batch_size, text_len: self.dataset.text_len() }
    }

    fn plans(&self) -> (StagePlan, StagePlan) {
        let (e1, e2) = self.stage_steps();
        let n = self.dataset.n_samples;
        (StagePlan { steps: e1, samples: n }, StagePlan { steps: e2, samples: n })
    }

    /// Compressor and schedule active in `stage` under `mode`.
    pub fn arms(&self, mode: Mode, stage: Stage) -> (Option<CompressionSpec>, Option<SkipSchedule>) {
        let comp = self.vtc.filter(|_| mode.uses_vtc() && self.vtc_stages.contains(stage));
        let sched = self.lds.filter(|_| mode.uses_lds() && self.lds_stages.contains(stage)).map(|mut s| {
            let (e1, e2) = self.stage_steps();
            s.total_steps = if stage == Stage::Alignment { e1 } else { e2 };
            s
        });
        (comp, sched)
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode.uses_vtc() && self.vtc.is_none() {
            return Err(Error::InvalidSpec(format!("mode {} needs a compression spec", mode.name())));
        }
        if mode.uses_lds() && self.lds.is_none() {
            return Err(Error::InvalidSpec(format!("mode {} needs a skip schedule", mode.name())));
        }
        Ok(())
    }

    /// Analytic FLOPs of a run without executing it.
    pub fn expected_flops(&self, mode: Mode) -> Result<RunFlops> {
        self.validate()?;
        self.check_mode(mode)?;
        let (a_c, a_s) = self.arms(mode, Stage::Alignment);
        let (f_c, f_s) = self.arms(mode, Stage::FineTune);
        self.cost_model().expected_run(self.plans(), (a_c.as_ref(), a_s.as_ref()), (f_c.as_ref(), f_s.as_ref()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub executed_layers: usize,
    pub seq_len: usize,
    pub cumulative_flops: f64,
    /// Filled in by the caller when wall-clock timing is wanted.
    pub wall_ms: Option<f64>,
    pub mask_bits: String,
}

/// Adam with per-parameter step counts; parameters sitting out a step (a
/// skipped layer) keep their moments and are not moved.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, model: &Mllm) -> Self {
        let sizes: Vec<usize> = model.parameters().map(|t| t.numel()).collect();
        Adam {
            cfg,
            steps: alloc::vec![0; sizes.len()],
            m: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
        }
    }

    /// Updates every trainable parameter not listed in `sitting_out`.
    pub fn step(&mut self, model: &mut Mllm, sitting_out: &[TensorId]) {
        let c = self.cfg;
        let ids: Vec<TensorId> = model.param_ids().filter(|&id| model.is_trainable(id)).collect();
        for id in ids {
            if sitting_out.contains(&id) {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
            let tensor = model.tape_mut().tensor_mut(id);
            let grad = tensor.grad().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, g)) in tensor.values_mut().iter_mut().zip(grad).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= c.learning_rate * mhat / (libm::sqrt(vhat) + c.eps_adam);
            }
        }
    }
}

pub struct RunOutcome {
    pub model: Mllm,
    pub records: Vec<MetricsRecord>,
    pub trace: Vec<StepTrace>,
    /// Measured counts with the analytic expectation attached.
    pub flops: RunFlops,
}

impl RunOutcome {
    /// Mean loss over the last `window` steps of `stage`.
    pub fn final_loss(&self, stage: Stage, window: usize) -> f64 {
        let losses: Vec<f64> = self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
        let tail = &losses[losses.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn initial_loss(&self, stage: Stage) -> Option<f64> {
        self.records.iter().find(|r| r.stage == stage).map(|r| r.loss)
    }
}

const SEED_DATA: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_LDS: u64 = 3;
const SEED_VTC: u64 = 4;

struct Session<'a, F: FnMut(&MetricsRecord)> {
    cfg: &'a TrainConfig,
    mode: Mode,
    model: Mllm,
    data: Vec<Sample>,
    cost: CostModel,
    cumulative: f64,
    records: Vec<MetricsRecord>,
    trace: Vec<StepTrace>,
    on_record: F,
}

impl<F: FnMut(&MetricsRecord)> Session<'_, F> {
    fn run_stage(&mut self, stage: Stage, steps: usize) -> Result<()> {
        let cfg = self.cfg;
        let c = cfg.model;
        self.model.set_stage_freezing(stage);
        let mut adam = Adam::new(cfg.optimizer, &self.model);
        let (comp, sched) = cfg.arms(self.mode, stage);
        let stage_key = match stage {
            Stage::Alignment => 0,
            Stage::FineTune => 1,
        };
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(rng::derive(cfg.seed, SEED_SHUFFLE ^ (stage_key << 8)));
        order.shuffle(&mut shuffle);
        let lds_seed = rng::derive(cfg.seed, SEED_LDS ^ (stage_key << 8));

        for (e, chunk) in order.chunks(cfg.batch_size).take(steps).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &self.data[i]).collect();
            let batch = Batch::from_samples(&samples, c.n_visual_tokens, c.patch_dim)?;
            self.model.reset();
            self.model.zero_grad();

            let z = self.model.encode_image(&batch.visual_features)?;
            let tokens = self.model.project(z)?;
            let (tokens, kept) = match &comp {
                Some(spec) => {
                    let idx = self.select(spec, stage_key, e, tokens, &batch)?;
                    let kept = idx.len();
                    (vtc::compress(self.model.tape_mut(), tokens, &idx)?, kept)
                }
                None => (tokens, c.n_visual_tokens),
            };
            let mask = match &sched {
                Some(s) => lds::sample_mask(s, e, lds_seed)?,
                None => SkipMask::none(e, c.n_layers),
            };
            let diverged = Error::Divergence { step: e, stage: stage.name() };
            let logits = self.model.forward(&batch, tokens, Some(&mask))?;
            let loss = match self.model.loss(logits, &batch) {
                Err(Error::Numeric(_)) => return Err(diverged),
                other => other?,
            };
            let loss_value = self.model.tape().value(loss)[0];
            if !loss_value.is_finite() {
                return Err(diverged);
            }
            self.model.backward(loss)?;
            debug_assert!(self.frozen_grads_are_zero(), "gradient reached a frozen parameter group");

            let sitting_out: Vec<TensorId> = mask
                .gates
                .iter()
                .enumerate()
                .filter(|(_, &g)| g)
                .flat_map(|(l, _)| self.model.layer_param_ids(l))
                .collect();
            adam.step(&mut self.model, &sitting_out);

            let seq_len = kept + batch.text_len();
            let executed = mask.executed_layers();
            let step_cost = self.cost.step_cost(batch.len(), seq_len, executed as f64);
            self.cumulative += step_cost.total();
            self.trace.push(StepTrace {
                stage,
                batch_size: batch.len(),
                visual_tokens: kept,
                seq_len,
                executed_layers: executed,
            });
            let record = MetricsRecord {
                step: e,
                stage,
                loss: loss_value,
                executed_layers: executed,
                seq_len,
                cumulative_flops: self.cumulative,
                wall_ms: None,
                mask_bits: mask.bits(),
            };
            (self.on_record)(&record);
            self.records.push(record);
        }
        self.model.reset();
        Ok(())
    }

    fn select(
        &self,
        spec: &CompressionSpec,
        stage_key: u64,
        e: usize,
        tokens: TensorId,
        batch: &Batch,
    ) -> Result<IndexSet> {
        let n = self.cfg.model.n_visual_tokens;
        match spec.strategy {
            Strategy::Uniform => vtc::uniform_indices(n, spec.p),
            Strategy::Random => {
                let seed = rng::derive(spec.seed, SEED_VTC ^ rng::hash2(stage_key, e as u64));
                vtc::random_indices(n, spec.p, seed)
            }
            Strategy::InstructionGuided => {
                let texts = batch
                    .instruction_ids
                    .iter()
                    .map(|ids| self.model.token_embeddings(ids))
                    .collect::<Result<Vec<_>>>()?;
                vtc::instruction_indices_batched(self.model.tape().tensor(tokens), &texts, spec.p)
            }
        }
    }

    fn frozen_grads_are_zero(&self) -> bool {
        self.model
            .param_ids()
            .filter(|&id| !self.model.is_trainable(id))
            .all(|id| self.model.tape().grad(id).iter().all(|&g| g == 0.0))
    }
}

/// Runs both stages, handing each metrics record to `on_record` as it is produced.
pub fn run_with<F: FnMut(&MetricsRecord)>(cfg: &TrainConfig, mode: Mode, on_record: F) -> Result<RunOutcome> {
    cfg.validate()?;
    cfg.check_mode(mode)?;
    let expected = cfg.expected_flops(mode)?;
    let model = Mllm::new(cfg.model, cfg.seed)?;
    let data = data::generate_dataset(&cfg.dataset, &cfg.model, rng::derive(cfg.seed, SEED_DATA))?;
    let mut session = Session {
        cfg,
        mode,
        model,
        data,
        cost: cfg.cost_model(),
        cumulative: 0.0,
        records: Vec::new(),
        trace: Vec::new(),
        on_record,
    };
    let (e1, e2) = cfg.stage_steps();
    session.run_stage(Stage::Alignment, e1)?;
    session.run_stage(Stage::FineTune, e2)?;
    let flops = session.cost.measure_run(&session.trace)?.with_expected(&expected);
    Ok(RunOutcome { model: session.model, records: session.records, trace: session.trace, flops })
}

pub fn run(cfg: &TrainConfig, mode: Mode) -> Result<RunOutcome> {
    run_with(cfg, mode, |_| {})
}

/// Frozen groups under a stage, for callers checking isolation.
pub fn frozen_groups(stage: Stage) -> &'static [ParamGroup] {
    match stage {
        Stage::Alignment => &[ParamGroup::VisionEncoder, ParamGroup::Embeddings, ParamGroup::Decoder, ParamGroup::Head],
        Stage::FineTune => &[ParamGroup::VisionEncoder],
    }
}
