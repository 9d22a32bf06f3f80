//! Variance schedules and closed-form forward noising.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_MAX_BETA: f64 = 0.999;

/// Serializable description of a schedule; enough to rebuild it bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Cosine {
        steps: usize,
        #[serde(default = "default_offset")]
        offset: f64,
        #[serde(default = "default_max_beta")]
        max_beta: f64,
    },
    /// Explicit `β_1..β_T`.
    Betas { betas: Vec<f64> },
}

fn default_offset() -> f64 {
    DEFAULT_COSINE_OFFSET
}

fn default_max_beta() -> f64 {
    DEFAULT_MAX_BETA
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Cosine {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_COSINE_OFFSET,
            max_beta: DEFAULT_MAX_BETA,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        match self {
            ScheduleSpec::Cosine {
                steps,
                offset,
                max_beta,
            } => DiffusionSchedule::cosine_clipped(*steps, *offset, *max_beta),
            ScheduleSpec::Betas { betas } => DiffusionSchedule::from_betas(betas.clone()),
        }
    }
}

/// Precomputed `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{i≤t} α_i` for `t = 0..=T`.
///
/// Index 0 holds the clean-image convention `ᾱ_0 = 1` (and `β_0 = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule with the default `β` clip of 0.999.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        Self::cosine_clipped(steps, offset, DEFAULT_MAX_BETA)
    }

    /// `ᾱ(t) ∝ cos²(((t/T + s)/(1 + s))·π/2)`, with `β_t = 1 − ᾱ(t)/ᾱ(t−1)` clipped to `max_beta`
    /// and the stored `ᾱ_t` taken as the running product of `1 − β_t`.
    pub fn cosine_clipped(steps: usize, offset: f64, max_beta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(offset.is_finite() && offset > 0.0) {
            return Err(Error::Config(format!("cosine offset must be positive, got {offset}")));
        }
        if !(max_beta > 0.0 && max_beta < 1.0) {
            return Err(Error::Config(format!("max beta must lie in (0, 1), got {max_beta}")));
        }
        let angle = |t: usize| ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2;
        let mut betas = Vec::with_capacity(steps);
        for t in 1..=steps {
            let (a, b) = (angle(t), angle(t - 1));
            // 1 − cos²a / cos²b = sin(a + b)·sin(a − b) / cos²b, without the cancellation.
            let cb = b.cos();
            let beta = (a + b).sin() * (a - b).sin() / (cb * cb);
            betas.push(beta.min(max_beta));
        }
        let mut schedule = Self::tables(betas)?;
        schedule.spec = ScheduleSpec::Cosine {
            steps,
            offset,
            max_beta,
        };
        Ok(schedule)
    }

    /// Arbitrary schedule from `β_1..β_T`, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        Self::tables(betas)
    }

    fn tables(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let spec = ScheduleSpec::Betas { betas: betas.clone() };
        let mut all_betas = Vec::with_capacity(betas.len() + 1);
        all_betas.push(0.0);
        all_betas.extend_from_slice(&betas);
        let alphas: Vec<f64> = all_betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for &a in &alphas[1..] {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule {
            spec,
            betas: all_betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `β_1..β_T`
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn check_step(&self, t: i64, min: i64) -> Result<usize> {
        if t < min || t > self.steps() as i64 {
            return Err(Error::Index {
                index: t,
                max: self.steps(),
            });
        }
        Ok(t as usize)
    }

    /// One forward transition `√(1 − β_t)·x_{t−1} + √β_t·noise`, `1 ≤ t ≤ T`.
    pub fn q_step(&self, x_prev: &ImageGrid, t: usize, noise: &ImageGrid) -> Result<ImageGrid> {
        let t = self.check_step(t as i64, 1)?;
        let beta = self.beta(t);
        x_prev.lincomb((1.0 - beta).sqrt(), noise, beta.sqrt())
    }

    /// Jump straight to step `t`: `√ᾱ_t·x0 + √(1 − ᾱ_t)·eps`, `0 ≤ t ≤ T`.
    pub fn q_sample(&self, x0: &ImageGrid, t: usize, eps: &ImageGrid) -> Result<ImageGrid> {
        let t = self.check_step(t as i64, 0)?;
        x0.ensure_same_shape(eps)?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let ab = self.alpha_bar(t);
        x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Same schedule tables, compared bitwise.
    pub fn same_as(&self, other: &DiffusionSchedule) -> bool {
        self.betas.len() == other.betas.len()
            && self
                .betas
                .iter()
                .zip(&other.betas)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IntensityRange;

    // Reference values evaluated with 50-digit arithmetic (mpmath) for T = 1000, s = 0.008.
    const BETA_1: f64 = 0.000_041_284_224_821_777_805;
    const BETA_2: f64 = 0.000_046_141_752_736_694_51;
    const BETA_500: f64 = 0.003_145_886_230_478_196_5;
    const BETA_999: f64 = 0.749_999_392_901_162;
    const ALPHA_BAR_500: f64 = 0.493_843_590_440_637_7;
    const ALPHA_BAR_1000: f64 = 2.428_766_907_034_468_3e-9;

    #[test]
    fn cosine_betas_match_high_precision_reference() {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        for (t, want) in [(1, BETA_1), (2, BETA_2), (500, BETA_500), (999, BETA_999)] {
            let got = s.beta(t);
            assert!((got - want).abs() < 1e-12, "beta_{t}: {got} vs {want}");
            assert!(((got - want) / want).abs() < 1e-10, "beta_{t} relative");
        }
        assert_eq!(s.beta(1000), 0.999);
        assert!(((s.alpha_bar(500) - ALPHA_BAR_500) / ALPHA_BAR_500).abs() < 1e-12);
        assert!(((s.alpha_bar(1000) - ALPHA_BAR_1000) / ALPHA_BAR_1000).abs() < 1e-10);
    }

    #[test]
    fn cosine_alpha_bar_decreases_to_near_zero() {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn single_step_schedule_is_clipped() {
        let s = DiffusionSchedule::cosine(1, 0.5).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1), 0.999);
        let s = DiffusionSchedule::cosine_clipped(1, 0.008, 0.9).unwrap();
        assert_eq!(s.beta(1), 0.9);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(DiffusionSchedule::cosine(0, 0.008), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::cosine(10, 0.0), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::cosine(10, -1.0), Err(Error::Config(_))));
        assert!(matches!(
            DiffusionSchedule::from_betas(vec![0.5, 1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        // Compensated log-sum as an independent route to the product.
        let mut log_sum = 0.0f64;
        let mut comp = 0.0f64;
        for t in 1..=1000 {
            let y = (1.0 - s.beta(t)).ln() - comp;
            let next = log_sum + y;
            comp = (next - log_sum) - y;
            log_sum = next;
            let want = log_sum.exp();
            assert!(((s.alpha_bar(t) - want) / want).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = DiffusionSchedule::cosine(257, 0.013).unwrap();
        let b = DiffusionSchedule::cosine(257, 0.013).unwrap();
        assert!(a.same_as(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = ScheduleSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        let back: ScheduleSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(back.build().unwrap().same_as(&spec.build().unwrap()));
    }

    #[test]
    fn q_sample_at_zero_is_identity() {
        let s = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let x = ImageGrid::from_fn(3, 3, IntensityRange::SIGNED_UNIT, |r, c| r as f64 - c as f64 * 0.5);
        let e = ImageGrid::filled(3, 3, 0.7, IntensityRange::SIGNED_UNIT);
        assert_eq!(s.q_sample(&x, 0, &e).unwrap(), x);
    }

    #[test]
    fn q_sample_at_terminal_step_is_mostly_noise() {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        let x = ImageGrid::from_fn(4, 4, IntensityRange::SIGNED_UNIT, |r, c| (r * 4 + c) as f64 / 16.0);
        let e = ImageGrid::from_fn(4, 4, IntensityRange::SIGNED_UNIT, |r, c| ((r + 2 * c) as f64).cos());
        let out = s.q_sample(&x, 1000, &e).unwrap();
        let dev = out.lincomb(1.0, &e, -1.0).unwrap().norm() / e.norm();
        assert!(dev < s.alpha_bar(1000).sqrt() * x.norm());
    }

    #[test]
    fn q_step_limits() {
        let s = DiffusionSchedule::from_betas(vec![1e-12, 0.3]).unwrap();
        let x = ImageGrid::from_fn(2, 3, IntensityRange::SIGNED_UNIT, |r, c| 0.25 + r as f64 - c as f64);
        let e = ImageGrid::from_fn(2, 3, IntensityRange::SIGNED_UNIT, |r, c| {
            (r as f64 + 1.3 * c as f64).sin()
        });
        let out = s.q_step(&x, 1, &e).unwrap();
        assert!(out.lincomb(1.0, &x, -1.0).unwrap().norm() < 1e-6 * x.norm());
        let zero = ImageGrid::zeros_like(&x);
        let out = s.q_step(&zero, 2, &e).unwrap();
        for (a, b) in out.data().iter().zip(e.data()) {
            assert_eq!(*a, 0.3f64.sqrt() * b);
        }
    }

    #[test]
    fn steps_out_of_range_are_index_errors() {
        let s = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let x = ImageGrid::filled(2, 2, 0.0, IntensityRange::SIGNED_UNIT);
        assert!(matches!(s.q_step(&x, 0, &x), Err(Error::Index { .. })));
        assert!(matches!(s.q_step(&x, 11, &x), Err(Error::Index { .. })));
        assert!(matches!(s.q_sample(&x, 11, &x), Err(Error::Index { .. })));
    }
}
