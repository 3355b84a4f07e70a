mod common;

use proptest::prelude::*;
use sts_core::lds::{self, expected_executed_fraction, sample_mask, schedule_table, skip_probability};
use sts_core::{Error, SkipSchedule};

fn sched(alpha: f64, epsilon: f64, e: usize, l: usize) -> SkipSchedule {
    SkipSchedule::new(alpha, epsilon, e, l).unwrap()
}

#[test]
fn endpoint_and_default_values() {
    let s = sched(0.5, 0.5, 100, 24);
    for l in 0..24 {
        assert_eq!(skip_probability(&s, 100, l).unwrap(), 0.0);
    }
    assert_eq!(skip_probability(&s, 0, 0).unwrap(), 0.25);
    assert_eq!(skip_probability(&s, 0, 23).unwrap(), 0.75);
}

#[test]
fn probabilities_above_one_are_clamped() {
    let s = sched(0.7, 0.5, 10, 8);
    assert!((s.raw_probability(0, 7).unwrap() - 1.05).abs() < 1e-12);
    assert_eq!(skip_probability(&s, 0, 7).unwrap(), 1.0);
}

#[test]
fn single_layer_is_pure_step_decay() {
    let s = sched(0.6, 0.9, 4, 1);
    assert_eq!(s.depth_factor(0), 1.0);
    assert!((skip_probability(&s, 2, 0).unwrap() - 0.6 * 0.25).abs() < 1e-15);
}

#[test]
fn invalid_schedules_and_ranges() {
    assert!(matches!(SkipSchedule::new(-0.1, 0.5, 10, 4), Err(Error::InvalidSpec(_))));
    assert!(matches!(SkipSchedule::new(0.5, -0.1, 10, 4), Err(Error::InvalidSpec(_))));
    assert!(matches!(SkipSchedule::new(f64::NAN, 0.5, 10, 4), Err(Error::InvalidSpec(_))));
    assert!(SkipSchedule::new(0.5, 0.5, 0, 4).is_err());
    assert!(SkipSchedule::new(0.5, 0.5, 10, 0).is_err());
    let s = sched(0.5, 0.5, 10, 4);
    assert!(matches!(skip_probability(&s, 11, 0), Err(Error::Range { .. })));
    assert!(matches!(skip_probability(&s, 0, 4), Err(Error::Range { .. })));
}

#[test]
fn masks_at_endpoint_and_zero_alpha_execute_everything() {
    let s = sched(0.9, 0.5, 50, 12);
    let z = sched(0.0, 0.5, 50, 12);
    for seed in 0..200 {
        assert_eq!(sample_mask(&s, 50, seed).unwrap().executed_layers(), 12);
        for e in [0, 17, 49] {
            assert!(sample_mask(&z, e, seed).unwrap().gates.iter().all(|&g| !g));
        }
    }
}

#[test]
fn masks_depend_only_on_seed_and_step() {
    let s = sched(0.5, 0.5, 100, 16);
    let forward: Vec<_> = (0..100).map(|e| sample_mask(&s, e, 7).unwrap()).collect();
    let backward: Vec<_> = (0..100).rev().map(|e| sample_mask(&s, e, 7).unwrap()).collect();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a, b);
    }
    assert_ne!(forward, (0..100).map(|e| sample_mask(&s, e, 8).unwrap()).collect::<Vec<_>>());
}

#[test]
fn mask_frequencies_match_probabilities() {
    let s = sched(0.5, 0.5, 10, 24);
    let trials = 100_000u64;
    let mut counts = [0u64; 24];
    for seed in 0..trials {
        for (c, g) in counts.iter_mut().zip(sample_mask(&s, 0, seed).unwrap().gates) {
            *c += g as u64;
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        let p = skip_probability(&s, 0, l).unwrap();
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let freq = c as f64 / trials as f64;
        assert!((freq - p).abs() < 3.0 * sigma, "layer {l}: {freq} vs {p}");
    }
}

#[test]
fn expected_fraction_examples() {
    let s = sched(0.5, 0.5, 10, 24);
    assert_eq!(expected_executed_fraction(&s, 10).unwrap(), 1.0);
    assert!((expected_executed_fraction(&s, 0).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn mean_skip_rate_follows_riemann_sum() {
    let (alpha, e_total) = (0.5, 1000usize);
    let s = sched(alpha, 0.5, e_total, 8);
    let mean = (0..e_total).map(|e| 1.0 - expected_executed_fraction(&s, e).unwrap()).sum::<f64>() / e_total as f64;
    let e = e_total as f64;
    let closed = alpha * (e + 1.0) * (2.0 * e + 1.0) / (6.0 * e * e);
    assert!((mean - closed).abs() < 1e-12);
    assert!((mean - alpha / 3.0).abs() < 0.001);
}

#[test]
fn variance_is_sum_of_bernoulli_variances() {
    let s = sched(0.5, 0.5, 10, 4);
    let v: f64 = (0..4).map(|l| skip_probability(&s, 3, l).unwrap()).map(|p| p * (1.0 - p)).sum();
    assert_eq!(lds::executed_layers_variance(&s, 3).unwrap(), v);
}

#[test]
fn schedule_table_examples() {
    let s = sched(0.5, 0.5, 40, 6);
    let rows = schedule_table(&s, 40).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.step == 0 || r.step == 40));
    let rows = schedule_table(&s, 7).unwrap();
    assert_eq!(rows.last().unwrap().step, 40);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.p_skip));
        assert_eq!(r.p_skip, skip_probability(&s, r.step, r.layer).unwrap());
    }
    assert!(schedule_table(&s, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedule_laws(alpha in 0.0f64..=1.0, epsilon in 0.0f64..=1.0, total in 1usize..2000, layers in 1usize..64) {
        let s = sched(alpha, epsilon, total, layers);
        let stride = (total / 50).max(1);
        for l in 0..layers {
            prop_assert_eq!(skip_probability(&s, total, l).unwrap(), 0.0);
            let mut prev = f64::INFINITY;
            for e in (0..=total).step_by(stride) {
                let p = skip_probability(&s, e, l).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p <= prev);
                prev = p;
            }
        }
        let depth_mean = (0..layers).map(|l| s.depth_factor(l)).sum::<f64>() / layers as f64;
        prop_assert!((depth_mean - 1.0).abs() < 1e-12);
        if epsilon > 0.0 && layers > 1 && alpha > 0.0 {
            for e in (0..total).step_by(stride) {
                for l in 1..layers {
                    prop_assert!(s.raw_probability(e, l).unwrap() > s.raw_probability(e, l - 1).unwrap());
                    prop_assert!(skip_probability(&s, e, l).unwrap() >= skip_probability(&s, e, l - 1).unwrap());
                }
            }
        }
    }

    #[test]
    fn masks_have_one_gate_per_layer(seed in any::<u64>(), layers in 1usize..40, e in 0usize..=100) {
        let s = sched(0.5, 0.5, 100, layers);
        let m = sample_mask(&s, e, seed).unwrap();
        prop_assert_eq!(m.gates.len(), layers);
        prop_assert_eq!(m.bits().len(), layers);
        prop_assert!(m.executed_layers() <= layers);
        prop_assert_eq!(m, sample_mask(&s, e, seed).unwrap());
    }
}
