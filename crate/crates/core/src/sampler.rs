//! Reverse-process steps and the deterministic DDIM encode/decode loops.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Coefficients `(a, b)` of the deterministic update `x_to = a·x_from + b·ε̂`
/// between signal levels `ᾱ_from` and `ᾱ_to`.
pub fn ddim_coefficients(alpha_bar_from: f64, alpha_bar_to: f64) -> (f64, f64) {
    let ratio = (alpha_bar_to / alpha_bar_from).sqrt();
    let b = (1.0 - alpha_bar_to).sqrt() - (1.0 - alpha_bar_from).sqrt() * ratio;
    (ratio, b)
}

/// Deterministic update given an already-evaluated `ε̂`.
pub fn ddim_update(x: &ImageGrid, eps: &ImageGrid, alpha_bar_from: f64, alpha_bar_to: f64) -> Result<ImageGrid> {
    let (a, b) = ddim_coefficients(alpha_bar_from, alpha_bar_to);
    x.lincomb(a, eps, b)
}

/// One DDIM move from `t` to `t + dt` using `ε_θ(x_t, t)`.
///
/// `dt = +1` is one encode (noising) step, `dt = −1` one decode step.
pub fn ddim_step(x_t: &ImageGrid, t: usize, dt: i64, denoiser: &dyn Denoiser) -> Result<ImageGrid> {
    let schedule = denoiser.schedule();
    let t = schedule.check_step(t as i64, 0)?;
    if dt == 0 {
        return Err(Error::Config("ddim step size must be non-zero".into()));
    }
    let to = schedule.check_step(t as i64 + dt, 0)?;
    let eps = denoiser.predict_eps(x_t, t)?;
    ddim_update(x_t, &eps, schedule.alpha_bar(t), schedule.alpha_bar(to))
}

/// Posterior mean `μ_θ(x_t, t) = (x_t − (1 − α_t)/√(1 − ᾱ_t)·ε̂)/√α_t`.
pub fn ddpm_mean(x_t: &ImageGrid, eps: &ImageGrid, alpha: f64, alpha_bar: f64) -> Result<ImageGrid> {
    let inv = 1.0 / alpha.sqrt();
    x_t.lincomb(inv, eps, -inv * (1.0 - alpha) / (1.0 - alpha_bar).sqrt())
}

/// Ancestral step `μ_θ(x_t, t) + √β_t·noise`; at `t = 1` the mean is returned.
pub fn ddpm_step(x_t: &ImageGrid, t: usize, denoiser: &dyn Denoiser, noise: &ImageGrid) -> Result<ImageGrid> {
    let schedule = denoiser.schedule();
    let t = schedule.check_step(t as i64, 1)?;
    x_t.ensure_same_shape(noise)?;
    let eps = denoiser.predict_eps(x_t, t)?;
    let mean = ddpm_mean(x_t, &eps, schedule.alpha(t), schedule.alpha_bar(t))?;
    if t == 1 {
        return Ok(mean);
    }
    mean.lincomb(1.0, noise, schedule.beta(t).sqrt())
}

/// Full ancestral chain from `x_T` down to `x_0`, drawing fresh noise from `rng`.
pub fn ddpm_sample<R: Rng>(x_big_t: &ImageGrid, denoiser: &dyn Denoiser, rng: &mut R) -> Result<ImageGrid> {
    let mut x = x_big_t.clone();
    for t in (1..=denoiser.schedule().steps()).rev() {
        let noise = if t > 1 {
            let data = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            ImageGrid::new(x.height(), x.width(), data, x.range())?
        } else {
            ImageGrid::zeros_like(&x)
        };
        x = ddpm_step(&x, t, denoiser, &noise)?;
    }
    Ok(x)
}

/// Iterate plus optional per-step snapshots.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub x: ImageGrid,
    pub t: usize,
    pub trace: Option<LatentTrace>,
}

/// Snapshots `(t, x_t)` kept every `stride` steps (plus both endpoints).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    pub stride: usize,
    pub frames: Vec<TraceFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// Little-endian `f64` values, base64.
    pub data: String,
}

impl TraceFrame {
    pub fn image(&self, range: crate::image::IntensityRange) -> Result<ImageGrid> {
        let data = crate::denoiser::decode_f64s(&self.data)?;
        ImageGrid::new(self.height, self.width, data, range)
    }
}

impl LatentTrace {
    pub fn new(stride: usize) -> Self {
        LatentTrace {
            stride: stride.max(1),
            frames: Vec::new(),
        }
    }

    fn record(&mut self, t: usize, x: &ImageGrid, force: bool) {
        if force || t.is_multiple_of(self.stride) {
            if self.frames.last().is_some_and(|f| f.t == t) {
                return;
            }
            self.frames.push(TraceFrame {
                t,
                height: x.height(),
                width: x.width(),
                data: crate::denoiser::encode_f64s(x.data()),
            });
        }
    }

    /// Writes the indexed archive as one JSON document.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl SamplerState {
    pub fn new(x: ImageGrid, t: usize, trace_stride: Option<usize>) -> Self {
        let mut trace = trace_stride.map(LatentTrace::new);
        if let Some(tr) = trace.as_mut() {
            tr.record(t, &x, true);
        }
        SamplerState { x, t, trace }
    }

    fn advance(&mut self, dt: i64, denoiser: &dyn Denoiser, last: bool) -> Result<()> {
        self.x = ddim_step(&self.x, self.t, dt, denoiser)?;
        self.t = (self.t as i64 + dt) as usize;
        if let Some(tr) = self.trace.as_mut() {
            tr.record(self.t, &self.x, last);
        }
        Ok(())
    }
}

/// `x_T` from `x_0` by `T` forward DDIM steps.
pub fn encode(x0: &ImageGrid, denoiser: &dyn Denoiser) -> Result<ImageGrid> {
    Ok(encode_traced(x0, denoiser, None)?.x)
}

pub fn encode_traced(x0: &ImageGrid, denoiser: &dyn Denoiser, trace_stride: Option<usize>) -> Result<SamplerState> {
    denoiser.check_input(x0)?;
    let big_t = denoiser.schedule().steps();
    let mut state = SamplerState::new(x0.clone(), 0, trace_stride);
    for t in 0..big_t {
        state.advance(1, denoiser, t + 1 == big_t)?;
    }
    Ok(state)
}

/// `x_0` from a latent `x_T` by `T` reverse DDIM steps.
pub fn decode(latent: &ImageGrid, denoiser: &dyn Denoiser) -> Result<ImageGrid> {
    Ok(decode_traced(latent, denoiser, None)?.x)
}

pub fn decode_traced(latent: &ImageGrid, denoiser: &dyn Denoiser, trace_stride: Option<usize>) -> Result<SamplerState> {
    denoiser.check_input(latent)?;
    let big_t = denoiser.schedule().steps();
    let mut state = SamplerState::new(latent.clone(), big_t, trace_stride);
    for t in (1..=big_t).rev() {
        state.advance(-1, denoiser, t == 1)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGaussianDenoiser, ZeroDenoiser};
    use crate::image::IntensityRange;
    use crate::schedule::DiffusionSchedule;

    #[test]
    fn equal_signal_levels_give_identity() {
        let (a, b) = ddim_coefficients(0.37, 0.37);
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.0);
        let x = ImageGrid::from_fn(2, 2, IntensityRange::SIGNED_UNIT, |r, c| r as f64 - 0.3 * c as f64);
        let e = ImageGrid::filled(2, 2, 5.0, IntensityRange::SIGNED_UNIT);
        assert_eq!(ddim_update(&x, &e, 0.37, 0.37).unwrap(), x);
    }

    #[test]
    fn ddim_hand_evaluated_case() {
        let x = ImageGrid::filled(1, 1, 1.0, IntensityRange::SIGNED_UNIT);
        let e = ImageGrid::filled(1, 1, 0.5, IntensityRange::SIGNED_UNIT);
        let out = ddim_update(&x, &e, 0.8, 0.7).unwrap();
        let r: f64 = (0.7f64 / 0.8).sqrt();
        let want = r * 1.0 + (0.3f64.sqrt() - 0.2f64.sqrt() * r) * 0.5;
        assert!((out.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn ddpm_mean_hand_evaluated_case() {
        let x = ImageGrid::filled(1, 1, 1.0, IntensityRange::SIGNED_UNIT);
        let e = ImageGrid::filled(1, 1, 0.2, IntensityRange::SIGNED_UNIT);
        let out = ddpm_mean(&x, &e, 0.99, 0.5).unwrap();
        let want = (1.0 / 0.99f64.sqrt()) * (1.0 - (0.01 / 0.5f64.sqrt()) * 0.2);
        assert!((out.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn ddpm_step_with_zero_prediction_rescales() {
        let s = DiffusionSchedule::cosine(20, 0.008).unwrap();
        let d = ZeroDenoiser::new(s.clone());
        let x = ImageGrid::from_fn(3, 3, IntensityRange::SIGNED_UNIT, |r, c| (r * 3 + c) as f64 - 4.0);
        let zero = ImageGrid::zeros_like(&x);
        for t in [1, 7, 20] {
            let out = ddpm_step(&x, t, &d, &zero).unwrap();
            let a = s.alpha(t).sqrt();
            for (o, v) in out.data().iter().zip(x.data()) {
                assert_eq!(*o, v * (1.0 / a));
            }
        }
    }

    #[test]
    fn final_ddpm_step_ignores_noise() {
        let s = DiffusionSchedule::cosine(20, 0.008).unwrap();
        let d = ZeroDenoiser::new(s);
        let x = ImageGrid::filled(2, 2, 0.5, IntensityRange::SIGNED_UNIT);
        let n = ImageGrid::filled(2, 2, 3.0, IntensityRange::SIGNED_UNIT);
        assert_eq!(
            ddpm_step(&x, 1, &d, &n).unwrap(),
            ddpm_step(&x, 1, &d, &ImageGrid::zeros_like(&x)).unwrap()
        );
    }

    #[test]
    fn zero_denoiser_encode_is_pure_rescaling() {
        let s = DiffusionSchedule::cosine(50, 0.008).unwrap();
        let d = ZeroDenoiser::new(s.clone());
        let x = ImageGrid::from_fn(4, 4, IntensityRange::SIGNED_UNIT, |r, c| ((r + 2 * c) as f64).sin());
        let z = encode(&x, &d).unwrap();
        let k = s.alpha_bar(50).sqrt();
        for (a, b) in z.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() <= 1e-12 * k);
        }
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let s = DiffusionSchedule::cosine(100, 0.008).unwrap();
        let d = AnalyticGaussianDenoiser::constant(4, 4, 0.3, 0.04, s).unwrap();
        let x = ImageGrid::from_fn(4, 4, IntensityRange::SIGNED_UNIT, |r, c| {
            0.3 + 0.1 * ((r * 5 + c) as f64).cos()
        });
        let z1 = encode(&x, &d).unwrap();
        let z2 = encode(&x, &d).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(decode(&z1, &d).unwrap(), decode(&z2, &d).unwrap());
    }

    #[test]
    fn one_step_roundtrip_is_first_order_accurate() {
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        let d = AnalyticGaussianDenoiser::constant(3, 3, 0.2, 0.09, s).unwrap();
        let x = ImageGrid::from_fn(3, 3, IntensityRange::SIGNED_UNIT, |r, c| {
            0.1 * r as f64 - 0.2 * c as f64 + 0.4
        });
        for t in [10, 400, 800] {
            let up = ddim_step(&x, t, 1, &d).unwrap();
            let back = ddim_step(&up, t + 1, -1, &d).unwrap();
            let err = back.lincomb(1.0, &x, -1.0).unwrap().norm() / x.norm();
            assert!(err < 1e-3, "t = {t}: {err}");
        }
    }

    #[test]
    fn trace_keeps_stride_and_endpoints() {
        let s = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let d = ZeroDenoiser::new(s);
        let x = ImageGrid::filled(2, 2, 0.5, IntensityRange::SIGNED_UNIT);
        let st = encode_traced(&x, &d, Some(4)).unwrap();
        let ts: Vec<usize> = st.trace.unwrap().frames.iter().map(|f| f.t).collect();
        assert_eq!(ts, vec![0, 4, 8, 10]);
        let st = encode_traced(&x, &d, Some(4)).unwrap();
        let last = st.trace.unwrap().frames.last().unwrap().image(x.range()).unwrap();
        assert_eq!(last, st.x);
        let st = decode_traced(&x, &d, Some(3)).unwrap();
        let ts: Vec<usize> = st.trace.unwrap().frames.iter().map(|f| f.t).collect();
        assert_eq!(ts, vec![10, 9, 6, 3, 0]);
    }

    #[test]
    fn out_of_range_steps_are_rejected() {
        let s = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let d = ZeroDenoiser::new(s);
        let x = ImageGrid::filled(2, 2, 0.5, IntensityRange::SIGNED_UNIT);
        assert!(matches!(ddim_step(&x, 10, 1, &d), Err(Error::Index { .. })));
        assert!(matches!(ddim_step(&x, 0, -1, &d), Err(Error::Index { .. })));
        assert!(matches!(ddpm_step(&x, 0, &d, &x), Err(Error::Index { .. })));
        assert!(matches!(ddpm_step(&x, 11, &d, &x), Err(Error::Index { .. })));
    }

    #[test]
    fn normalization_mismatch_is_a_data_error() {
        let s = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let d = ZeroDenoiser::new(s);
        let x = ImageGrid::filled(2, 2, 0.5, IntensityRange::U8);
        assert!(matches!(encode(&x, &d), Err(Error::Data(_))));
    }
}
