use proptest::prelude::*;
use sts_core::flops::{self, layer_cost, layer_flops, CostModel, Pass, ReportStage, StagePlan, StepTrace};
use sts_core::lds::{self, sample_mask};
use sts_core::model::ModelConfig;
use sts_core::{CompressionSpec, SkipSchedule, Stage, Strategy};

fn desk_model() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 8,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 64,
        n_visual_tokens: 32,
        max_seq_len: 128,
        patch_dim: 16,
    }
}

fn cost(text_len: usize) -> CostModel {
    CostModel { model: desk_model(), batch_size: 8, text_len }
}

fn plan(steps: usize) -> StagePlan {
    StagePlan::full_batches(steps, 8)
}

fn uniform(p: f64) -> CompressionSpec {
    CompressionSpec::new(Strategy::Uniform, p, 0).unwrap()
}

#[test]
fn hand_evaluated_layer_cost() {
    let m = desk_model();
    // 2·(4·32·64² + 2·32·64·256) + 2·(2·32²·64)
    let linear = 2.0 * (4.0 * 32.0 * 4096.0 + 2.0 * 32.0 * 64.0 * 256.0);
    let quadratic = 2.0 * (2.0 * 1024.0 * 64.0);
    assert_eq!(linear + quadratic, 3_407_872.0);
    assert_eq!(layer_flops(&m, 32, Pass::Forward), 3_407_872.0);
    assert_eq!(layer_flops(&m, 32, Pass::ForwardBackward), 3.0 * 3_407_872.0);
}

#[test]
fn linear_terms_scale_linearly() {
    let m = desk_model();
    for s in [1, 7, 40, 72] {
        let (a, b) = (layer_cost(&m, s, Pass::Forward), layer_cost(&m, 2 * s, Pass::Forward));
        assert_eq!(b.linear, 2.0 * a.linear);
        assert_eq!(b.quadratic, 4.0 * a.quadratic);
    }
}

#[test]
fn no_sparsification_is_exactly_baseline() {
    let run = cost(40).expected_run((plan(50), plan(50)), (None, None), (None, None)).unwrap();
    for r in run.reports() {
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.actual_flops_expected, Some(r.baseline_flops));
    }
}

#[test]
fn lds_only_matches_riemann_closed_form() {
    let e = 1000usize;
    let s = SkipSchedule::new(0.5, 0.5, e, 8).unwrap();
    let run = cost(40).expected_run((plan(e), plan(e)), (None, None), (None, Some(&s))).unwrap();
    let ef = e as f64;
    let closed = 1.0 - 0.5 * (ef + 1.0) * (2.0 * ef + 1.0) / (6.0 * ef * ef);
    assert!((run.finetune.decoder_ratio() - closed).abs() < 0.002);
    assert!((run.finetune.decoder_ratio() - 5.0 / 6.0).abs() < 0.002);
    assert_eq!(run.alignment.decoder_ratio(), 1.0);
}

#[test]
fn measured_decoder_flops_within_three_sigma_of_expectation() {
    let e = 1000usize;
    let s = SkipSchedule::new(0.5, 0.5, e, 8).unwrap();
    let c = cost(40);
    let seq = c.full_seq_len();
    let mut trace = Vec::new();
    let mut var = 0.0;
    for step in 0..e {
        let m = sample_mask(&s, step, 2024).unwrap();
        var += lds::executed_layers_variance(&s, step).unwrap();
        trace.push(StepTrace {
            stage: Stage::FineTune,
            batch_size: 8,
            visual_tokens: 32,
            seq_len: seq,
            executed_layers: m.executed_layers(),
        });
    }
    let measured = c.measure_run(&trace).unwrap().finetune.decoder_ratio();
    let expected = c.expected_run((plan(0), plan(e)), (None, None), (None, Some(&s))).unwrap().finetune.decoder_ratio();
    let sigma = var.sqrt() / (e as f64 * 8.0);
    assert!((measured - expected).abs() < 3.0 * sigma, "{measured} vs {expected} (σ {sigma})");
}

#[test]
fn always_execute_trace_equals_expectation_exactly() {
    let c = cost(40);
    let comp = uniform(0.5);
    let s = SkipSchedule::new(0.0, 0.5, 30, 8).unwrap();
    let expected = c.expected_run((plan(30), plan(30)), (Some(&comp), None), (None, Some(&s))).unwrap();
    let mut trace = Vec::new();
    for _ in 0..30 {
        trace.push(StepTrace {
            stage: Stage::Alignment,
            batch_size: 8,
            visual_tokens: 16,
            seq_len: 56,
            executed_layers: 8,
        });
    }
    for _ in 0..30 {
        trace.push(StepTrace {
            stage: Stage::FineTune,
            batch_size: 8,
            visual_tokens: 32,
            seq_len: 72,
            executed_layers: 8,
        });
    }
    let measured = c.measure_run(&trace).unwrap();
    for (m, e) in measured.reports().iter().zip(expected.reports()) {
        assert_eq!(m.actual_flops_measured, e.actual_flops_expected);
        assert_eq!(m.baseline_flops, e.baseline_flops);
    }
}

#[test]
fn all_skip_trace_has_no_decoder_cost() {
    let c = cost(40);
    let trace =
        vec![
            StepTrace { stage: Stage::FineTune, batch_size: 8, visual_tokens: 32, seq_len: 72, executed_layers: 0 };
            5
        ];
    let run = c.measure_run(&trace).unwrap();
    assert_eq!(run.finetune.measured.unwrap().decoder(), 0.0);
    assert_eq!(run.finetune.skip_rate, 1.0);
}

#[test]
fn full_trace_equals_baseline() {
    let c = cost(40);
    let trace =
        vec![
            StepTrace { stage: Stage::Alignment, batch_size: 8, visual_tokens: 32, seq_len: 72, executed_layers: 8 };
            7
        ];
    let run = c.measure_run(&trace).unwrap();
    assert_eq!(run.alignment.report().ratio, 1.0);
    assert!(c.measure_run(&[]).is_err());
}

#[test]
fn totals_are_additive_across_stages() {
    let c = cost(40);
    let s = SkipSchedule::new(0.5, 0.5, 40, 8).unwrap();
    let comp = uniform(0.5);
    let run = c.expected_run((plan(40), plan(40)), (Some(&comp), None), (None, Some(&s))).unwrap();
    let [a, f, t] = run.reports();
    assert_eq!(t.stage, ReportStage::Total);
    assert_eq!(t.baseline_flops, a.baseline_flops + f.baseline_flops);
    assert!(
        (t.actual_flops_expected.unwrap() - a.actual_flops_expected.unwrap() - f.actual_flops_expected.unwrap()).abs()
            < 1e-3
    );
    assert!(t.ratio > 0.0 && t.ratio < 1.0);
    assert_eq!(a.realized_retention, 0.5);
    assert_eq!(f.realized_retention, 1.0);
    assert_eq!(t.realized_retention, 0.75);
}

#[test]
fn paper_like_proportions_land_in_table_regime() {
    // Longer text relative to the visual stream, as in instruction data.
    let c = cost(64);
    let e = 500;
    let s = SkipSchedule::new(0.5, 0.5, e, 8).unwrap();
    let comp = uniform(0.5);
    let ratio = c.expected_run((plan(e), plan(e)), (Some(&comp), None), (None, Some(&s))).unwrap().total().ratio;
    assert!((0.80..=0.86).contains(&ratio), "ratio {ratio}");
}

#[test]
fn random_compression_uses_binomial_expectation() {
    let c = cost(40);
    let comp = CompressionSpec::new(Strategy::Random, 0.25, 3).unwrap();
    let run = c.expected_run((plan(10), plan(10)), (Some(&comp), None), (None, None)).unwrap();
    let pmf = flops::binomial_pmf(32, 0.25);
    let mean_kept = pmf.iter().enumerate().map(|(k, w)| k.max(1) as f64 * w).sum::<f64>();
    assert!((run.alignment.retention - mean_kept / 32.0).abs() < 1e-12);
    assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn partial_last_batch_is_costed() {
    let p = StagePlan { steps: 3, samples: 20 };
    let c = cost(40);
    let run = c.expected_run((p, p), (None, None), (None, None)).unwrap();
    let per_sample = c.baseline_step(1).total();
    assert!((run.alignment.baseline.total() - 20.0 * per_sample).abs() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_is_monotone_in_alpha_and_p(a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, p1 in 0.01f64..=1.0, p2 in 0.01f64..=1.0, steps in 1usize..200) {
        let c = cost(40);
        let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let ratio = |alpha: f64, p: f64| {
            let s = SkipSchedule::new(alpha, 0.5, steps, 8).unwrap();
            let comp = uniform(p);
            c.expected_run((plan(steps), plan(steps)), (Some(&comp), None), (None, Some(&s))).unwrap().total().ratio
        };
        prop_assert!(ratio(ahi, 0.5) <= ratio(alo, 0.5));
        prop_assert!(ratio(0.5, plo) <= ratio(0.5, phi));
        let r = ratio(alo, plo);
        prop_assert!(r > 0.0 && r <= 1.0);
    }
}
