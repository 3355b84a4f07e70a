//! Layer skipping schedule.
//!
//! Layer `l` of an `L`-layer decoder is bypassed at optimizer step `e` with
//! probability
//!
//! ```text
//! p_l(e) = α·((E − e)/E)² · (1 + ε·(2l − (L − 1))/(L − 1))
//! ```
//!
//! clamped into `[0, 1]`. The first factor decays quadratically to zero over
//! the `E` steps of the stage; the second tilts skipping toward deeper layers
//! and averages to exactly one over the stack.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distributions::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipSchedule {
    pub alpha: f64,
    pub epsilon: f64,
    pub total_steps: usize,
    pub num_layers: usize,
}

impl SkipSchedule {
    pub fn new(alpha: f64, epsilon: f64, total_steps: usize, num_layers: usize) -> Result<Self> {
        let s = SkipSchedule { alpha, epsilon, total_steps, num_layers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidSpec(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidSpec(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidSpec("total_steps must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidSpec("num_layers must be at least 1".into()));
        }
        Ok(())
    }

    fn check(&self, e: usize, l: usize) -> Result<()> {
        if e > self.total_steps {
            return Err(Error::Range { what: "step", value: e, max: self.total_steps });
        }
        if l >= self.num_layers {
            return Err(Error::Range { what: "layer", value: l, max: self.num_layers - 1 });
        }
        Ok(())
    }

    /// `α·((E − e)/E)²`
    pub fn step_factor(&self, e: usize) -> f64 {
        let r = (self.total_steps - e.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.alpha * r * r
    }

    /// `1 + ε·(2l − (L − 1))/(L − 1)`; identically 1 for a single layer.
    pub fn depth_factor(&self, l: usize) -> f64 {
        if self.num_layers == 1 {
            return 1.0;
        }
        let span = (self.num_layers - 1) as f64;
        1.0 + self.epsilon * (2.0 * l as f64 - span) / span
    }

    /// Unclamped product of the two factors.
    pub fn raw_probability(&self, e: usize, l: usize) -> Result<f64> {
        self.check(e, l)?;
        Ok(self.step_factor(e) * self.depth_factor(l))
    }
}

pub fn skip_probability(s: &SkipSchedule, e: usize, l: usize) -> Result<f64> {
    Ok(s.raw_probability(e, l)?.clamp(0.0, 1.0))
}

/// Gate bits for one optimizer step; `true` means the layer is bypassed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipMask {
    pub step: usize,
    pub gates: Vec<bool>,
}

impl SkipMask {
    /// Every layer executes.
    pub fn none(step: usize, num_layers: usize) -> Self {
        SkipMask { step, gates: alloc::vec![false; num_layers] }
    }

    pub fn all(step: usize, num_layers: usize) -> Self {
        SkipMask { step, gates: alloc::vec![true; num_layers] }
    }

    /// Skips exactly the listed layers.
    pub fn skipping(step: usize, num_layers: usize, skipped: &[usize]) -> Self {
        let mut m = Self::none(step, num_layers);
        for &l in skipped {
            m.gates[l] = true;
        }
        m
    }

    pub fn executed_layers(&self) -> usize {
        self.gates.iter().filter(|&&g| !g).count()
    }

    /// One character per layer, `1` for skipped.
    pub fn bits(&self) -> String {
        self.gates.iter().map(|&g| if g { '1' } else { '0' }).collect()
    }
}

/// Independent Bernoulli draw per layer. The generator for layer `l` at step
/// `e` is keyed by `seed ⊕ hash(e, l)`, so masks do not depend on call order.
pub fn sample_mask(s: &SkipSchedule, e: usize, seed: u64) -> Result<SkipMask> {
    let mut gates = Vec::with_capacity(s.num_layers);
    for l in 0..s.num_layers {
        let p = skip_probability(s, e, l)?;
        let coin = Bernoulli::new(p).map_err(|_| Error::Numeric("skip probability outside [0, 1]"))?;
        let mut r = rng::keyed(seed, e as u64, l as u64);
        gates.push(coin.sample(&mut r));
    }
    Ok(SkipMask { step: e, gates })
}

/// `1 − (1/L)·Σ_l p_l(e)` with clamped probabilities.
pub fn expected_executed_fraction(s: &SkipSchedule, e: usize) -> Result<f64> {
    let mut skipped = 0.0;
    for l in 0..s.num_layers {
        skipped += skip_probability(s, e, l)?;
    }
    Ok(1.0 - skipped / s.num_layers as f64)
}

/// Variance of the number of executed layers at step `e`.
pub fn executed_layers_variance(s: &SkipSchedule, e: usize) -> Result<f64> {
    let mut var = 0.0;
    for l in 0..s.num_layers {
        let p = skip_probability(s, e, l)?;
        var += p * (1.0 - p);
    }
    Ok(var)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub step: usize,
    pub layer: usize,
    pub p_skip: f64,
}

/// Clamped probabilities at steps `0, stride, 2·stride, …` plus the endpoint `E`.
pub fn schedule_table(s: &SkipSchedule, step_stride: usize) -> Result<Vec<ScheduleRow>> {
    if step_stride == 0 {
        return Err(Error::InvalidSpec("step stride must be at least 1".into()));
    }
    s.validate()?;
    let mut steps: Vec<usize> = (0..=s.total_steps).step_by(step_stride).collect();
    if steps.last() != Some(&s.total_steps) {
        steps.push(s.total_steps);
    }
    let mut rows = Vec::with_capacity(steps.len() * s.num_layers);
    for e in steps {
        for l in 0..s.num_layers {
            rows.push(ScheduleRow { step: e, layer: l, p_skip: skip_probability(s, e, l)? });
        }
    }
    Ok(rows)
}
