//! Floating-point operation accounting.
//!
//! Only matrix products are counted; a multiply-add is two operations. Per
//! decoder layer and sample, with `s` tokens of width `d`:
//!
//! ```text
//! forward = 2·(4·s·d² + 2·s·d·d_ff)   linear: Q, K, V, O and the two MLP products
//!         + 2·(2·s²·d)                quadratic: scores and the probability-weighted sum
//! ```
//!
//! A backward pass costs twice its forward pass, so a training step is three
//! forward passes. Outside the decoder: the frozen encoder (`2·n·P²`,
//! forward only, nothing flows back into it), the projector (`2·n·P·d`) and the
//! output head (`2·s·d·V`). These are charged at the full, uncompressed
//! sequence in every run, so sparsification only ever reduces decoder cost.
//! Layer norms, softmax and activations are not counted.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::{self, SkipSchedule};
use crate::model::{ModelConfig, Stage};
use crate::vtc::{CompressionSpec, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

impl Pass {
    fn multiplier(self) -> f64 {
        match self {
            Pass::Forward => 1.0,
            Pass::ForwardBackward => 3.0,
        }
    }
}

/// Per-layer count split by its dependence on sequence length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerCost {
    pub linear: f64,
    pub quadratic: f64,
}

impl LayerCost {
    pub fn total(&self) -> f64 {
        self.linear + self.quadratic
    }
}

pub fn layer_cost(cfg: &ModelConfig, seq_len: usize, pass: Pass) -> LayerCost {
    let (s, d, f) = (seq_len as f64, cfg.d_model as f64, cfg.d_ff as f64);
    let m = pass.multiplier();
    LayerCost { linear: m * 2.0 * (4.0 * s * d * d + 2.0 * s * d * f), quadratic: m * 2.0 * (2.0 * s * s * d) }
}

pub fn layer_flops(cfg: &ModelConfig, seq_len: usize, pass: Pass) -> f64 {
    layer_cost(cfg, seq_len, pass).total()
}

/// Operation counts of one stage (or run), split for inspection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub decoder_linear: f64,
    pub decoder_quadratic: f64,
    pub non_decoder: f64,
}

impl Breakdown {
    pub fn decoder(&self) -> f64 {
        self.decoder_linear + self.decoder_quadratic
    }

    pub fn total(&self) -> f64 {
        self.decoder() + self.non_decoder
    }

    fn add(&mut self, o: &Breakdown) {
        self.decoder_linear += o.decoder_linear;
        self.decoder_quadratic += o.decoder_quadratic;
        self.non_decoder += o.non_decoder;
    }

    fn scaled(&self, c: f64) -> Breakdown {
        Breakdown {
            decoder_linear: c * self.decoder_linear,
            decoder_quadratic: c * self.decoder_quadratic,
            non_decoder: c * self.non_decoder,
        }
    }
}

/// Sizes that fix the cost of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub model: ModelConfig,
    pub batch_size: usize,
    /// Instruction plus response tokens per sample.
    pub text_len: usize,
}

/// Steps and samples of one stage; the last batch may be partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub steps: usize,
    pub samples: usize,
}

impl StagePlan {
    pub fn full_batches(steps: usize, batch_size: usize) -> Self {
        StagePlan { steps, samples: steps * batch_size }
    }

    fn batch_at(&self, step: usize, batch_size: usize) -> usize {
        batch_size.min(self.samples.saturating_sub(step * batch_size))
    }
}

/// What actually happened in one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub stage: Stage,
    pub batch_size: usize,
    pub visual_tokens: usize,
    pub seq_len: usize,
    pub executed_layers: usize,
}

impl CostModel {
    /// Encoder, projector and head cost of one training sample.
    fn non_decoder(&self) -> f64 {
        let c = &self.model;
        let (n, p, d, v) = (c.n_visual_tokens as f64, c.patch_dim as f64, c.d_model as f64, c.vocab_size as f64);
        let encoder = 2.0 * n * p * p;
        let projector = 2.0 * n * p * d;
        let head = 2.0 * self.full_seq_len() as f64 * d * v;
        encoder + Pass::ForwardBackward.multiplier() * (projector + head)
    }

    /// One training sample with `executed` decoder layers (may be an expectation).
    pub fn sample_cost(&self, seq_len: usize, executed: f64) -> Breakdown {
        let lc = layer_cost(&self.model, seq_len, Pass::ForwardBackward);
        Breakdown {
            decoder_linear: executed * lc.linear,
            decoder_quadratic: executed * lc.quadratic,
            non_decoder: self.non_decoder(),
        }
    }

    pub fn step_cost(&self, batch: usize, seq_len: usize, executed: f64) -> Breakdown {
        self.sample_cost(seq_len, executed).scaled(batch as f64)
    }

    pub fn full_seq_len(&self) -> usize {
        self.model.n_visual_tokens + self.text_len
    }

    pub fn baseline_step(&self, batch: usize) -> Breakdown {
        self.step_cost(batch, self.full_seq_len(), self.model.n_layers as f64)
    }

    /// Distribution of the retained visual token count.
    fn retained_pmf(&self, comp: Option<&CompressionSpec>) -> Vec<(usize, f64)> {
        let n = self.model.n_visual_tokens;
        let Some(c) = comp else {
            return alloc::vec![(n, 1.0)];
        };
        match c.strategy {
            Strategy::Uniform => {
                let stride = (libm::floor(1.0 / c.p) as usize).max(1);
                alloc::vec![(n.div_ceil(stride), 1.0)]
            }
            Strategy::InstructionGuided => {
                alloc::vec![((libm::floor(c.p * n as f64) as usize).clamp(1, n), 1.0)]
            }
            Strategy::Random => binomial_pmf(n, c.p).into_iter().enumerate().map(|(k, w)| (k.max(1), w)).collect(),
        }
    }

    /// Analytic expectation for one stage.
    pub fn expected_stage(
        &self,
        stage: Stage,
        plan: StagePlan,
        comp: Option<&CompressionSpec>,
        sched: Option<&SkipSchedule>,
    ) -> Result<StageCost> {
        let n = self.model.n_visual_tokens as f64;
        let layers = self.model.n_layers as f64;
        let pmf = self.retained_pmf(comp);
        let mean_kept: f64 = pmf.iter().map(|&(k, w)| k as f64 * w).sum();
        let mut baseline = Breakdown::default();
        let mut expected = Breakdown::default();
        let mut executed_total = 0.0;
        for e in 0..plan.steps {
            let batch = plan.batch_at(e, self.batch_size);
            let frac = match sched {
                Some(s) => lds::expected_executed_fraction(s, e)?,
                None => 1.0,
            };
            executed_total += frac;
            baseline.add(&self.baseline_step(batch));
            for &(k, w) in &pmf {
                let step = self.step_cost(batch, k + self.text_len, frac * layers);
                expected.add(&step.scaled(w));
            }
        }
        let steps = plan.steps.max(1) as f64;
        Ok(StageCost {
            stage,
            steps: plan.steps,
            baseline,
            expected: Some(expected),
            measured: None,
            retention: mean_kept / n,
            skip_rate: 1.0 - executed_total / steps,
        })
    }

    /// Analytic report for a two-stage run. Each stage gets the compressor and
    /// schedule passed for it (`None` disables that arm in that stage).
    pub fn expected_run(
        &self,
        plans: (StagePlan, StagePlan),
        alignment: (Option<&CompressionSpec>, Option<&SkipSchedule>),
        finetune: (Option<&CompressionSpec>, Option<&SkipSchedule>),
    ) -> Result<RunFlops> {
        Ok(RunFlops {
            alignment: self.expected_stage(Stage::Alignment, plans.0, alignment.0, alignment.1)?,
            finetune: self.expected_stage(Stage::FineTune, plans.1, finetune.0, finetune.1)?,
        })
    }

    /// Sums the cost formula over what the trainer actually executed.
    pub fn measure_run(&self, trace: &[StepTrace]) -> Result<RunFlops> {
        if trace.is_empty() {
            return Err(Error::Contract("cannot measure an empty trace"));
        }
        let n = self.model.n_visual_tokens as f64;
        let layers = self.model.n_layers as f64;
        let measure = |stage: Stage| {
            let mut baseline = Breakdown::default();
            let mut measured = Breakdown::default();
            let (mut steps, mut kept, mut executed) = (0usize, 0.0, 0.0);
            for t in trace.iter().filter(|t| t.stage == stage) {
                baseline.add(&self.baseline_step(t.batch_size));
                measured.add(&self.step_cost(t.batch_size, t.seq_len, t.executed_layers as f64));
                steps += 1;
                kept += t.visual_tokens as f64 / n;
                executed += t.executed_layers as f64 / layers;
            }
            let denom = steps.max(1) as f64;
            StageCost {
                stage,
                steps,
                baseline,
                expected: None,
                measured: Some(measured),
                retention: if steps == 0 { 1.0 } else { kept / denom },
                skip_rate: if steps == 0 { 0.0 } else { 1.0 - executed / denom },
            }
        };
        Ok(RunFlops { alignment: measure(Stage::Alignment), finetune: measure(Stage::FineTune) })
    }
}

/// `P(K = k)` for `K ~ Binomial(n, p)`, `k = 0..=n`.
pub fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    if p >= 1.0 {
        let mut v = alloc::vec![0.0; n + 1];
        v[n] = 1.0;
        return v;
    }
    let (lp, lq) = (libm::log(p), libm::log1p(-p));
    let lfact_n = libm::lgamma(n as f64 + 1.0);
    (0..=n)
        .map(|k| {
            let lc = lfact_n - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0);
            libm::exp(lc + k as f64 * lp + (n - k) as f64 * lq)
        })
        .collect()
}

/// Baseline, expected and measured counts for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: Stage,
    pub steps: usize,
    pub baseline: Breakdown,
    pub expected: Option<Breakdown>,
    pub measured: Option<Breakdown>,
    /// Mean fraction of visual tokens kept.
    pub retention: f64,
    /// Mean fraction of decoder layers skipped.
    pub skip_rate: f64,
}

impl StageCost {
    /// Measured over expected over baseline, whichever is present first.
    pub fn actual(&self) -> Breakdown {
        self.measured.or(self.expected).unwrap_or(self.baseline)
    }

    pub fn decoder_ratio(&self) -> f64 {
        self.actual().decoder() / self.baseline.decoder()
    }

    pub fn report(&self) -> FlopsReport {
        let stage = match self.stage {
            Stage::Alignment => ReportStage::Alignment,
            Stage::FineTune => ReportStage::FineTune,
        };
        FlopsReport {
            stage,
            baseline_flops: self.baseline.total(),
            actual_flops_expected: self.expected.map(|b| b.total()),
            actual_flops_measured: self.measured.map(|b| b.total()),
            ratio: self.actual().total() / self.baseline.total(),
            decoder_ratio: self.decoder_ratio(),
            realized_retention: self.retention,
            realized_skip_rate: self.skip_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFlops {
    pub alignment: StageCost,
    pub finetune: StageCost,
}

impl RunFlops {
    /// Copies the analytic expectation of `expected` into this (measured) run.
    pub fn with_expected(mut self, expected: &RunFlops) -> RunFlops {
        self.alignment.expected = expected.alignment.expected;
        self.finetune.expected = expected.finetune.expected;
        self
    }

    pub fn total(&self) -> FlopsReport {
        let stages = [&self.alignment, &self.finetune];
        let mut baseline = Breakdown::default();
        let mut expected = Breakdown::default();
        let mut measured = Breakdown::default();
        for s in stages {
            baseline.add(&s.baseline);
            if let Some(e) = &s.expected {
                expected.add(e);
            }
            if let Some(m) = &s.measured {
                measured.add(m);
            }
        }
        let has_expected = stages.iter().all(|s| s.expected.is_some());
        let has_measured = stages.iter().all(|s| s.measured.is_some());
        let actual: f64 = stages.iter().map(|s| s.actual().total()).sum();
        let actual_decoder: f64 = stages.iter().map(|s| s.actual().decoder()).sum();
        let steps: usize = stages.iter().map(|s| s.steps).sum();
        let weighted = |f: fn(&StageCost) -> f64| {
            if steps == 0 {
                0.0
            } else {
                stages.iter().map(|s| f(s) * s.steps as f64).sum::<f64>() / steps as f64
            }
        };
        FlopsReport {
            stage: ReportStage::Total,
            baseline_flops: baseline.total(),
            actual_flops_expected: has_expected.then(|| expected.total()),
            actual_flops_measured: has_measured.then(|| measured.total()),
            ratio: actual / baseline.total(),
            decoder_ratio: actual_decoder / baseline.decoder(),
            realized_retention: weighted(|s| s.retention),
            realized_skip_rate: weighted(|s| s.skip_rate),
        }
    }

    /// Alignment, fine-tune and total reports, in that order.
    pub fn reports(&self) -> [FlopsReport; 3] {
        [self.alignment.report(), self.finetune.report(), self.total()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStage {
    Alignment,
    FineTune,
    Total,
}

/// Per-stage operation counts against an unsparsified baseline of the same
/// steps. `ratio` uses the measured count when one exists, else the expected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub stage: ReportStage,
    pub baseline_flops: f64,
    pub actual_flops_expected: Option<f64>,
    pub actual_flops_measured: Option<f64>,
    pub ratio: f64,
    /// Same ratio restricted to the decoder blocks.
    pub decoder_ratio: f64,
    pub realized_retention: f64,
    pub realized_skip_rate: f64,
}
