//! ε-prediction models.

mod analytic;
mod checkpoint;
mod network;
mod train;

pub use analytic::{oracle_eps, AnalyticGaussianDenoiser};
pub(crate) use checkpoint::{decode_f64s, encode_f64s};
pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_SCHEMA_VERSION};
pub use network::NetworkDenoiser;
pub use train::{
    initial_state, smoothed_endpoints, train_denoiser, train_denoiser_with, LossRecord, TrainConfig, TrainOutcome,
    TrainState,
};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};
use crate::schedule::DiffusionSchedule;

/// A noise predictor `ε_θ(x_t, t)` tied to one diffusion schedule.
pub trait Denoiser: Send + Sync {
    fn schedule(&self) -> &DiffusionSchedule;

    /// Predicted noise, same shape as `x_t`. Deterministic.
    fn predict_eps(&self, x_t: &ImageGrid, t: usize) -> Result<ImageGrid>;

    /// Whether [`Denoiser::linearize`] is available.
    fn is_differentiable(&self) -> bool {
        false
    }

    /// Prediction together with its vector-Jacobian product at `x_t`.
    fn linearize(&self, _x_t: &ImageGrid, _t: usize) -> Result<Linearization<'_>> {
        Err(Error::NotDifferentiable)
    }

    /// Intensity range the model was trained in.
    fn normalization(&self) -> IntensityRange {
        IntensityRange::SIGNED_UNIT
    }

    /// Fixed input shape, when the model only accepts one.
    fn image_shape(&self) -> Option<(usize, usize)> {
        None
    }

    /// Rejects inputs the model was not built for.
    fn check_input(&self, x: &ImageGrid) -> Result<()> {
        if let Some(shape) = self.image_shape() {
            if shape != x.shape() {
                return Err(Error::Data(format!(
                    "image is {:?}, denoiser expects {:?}",
                    x.shape(),
                    shape
                )));
            }
        }
        if x.range() != self.normalization() {
            return Err(Error::Data(format!(
                "image intensities are in [{}, {}], denoiser expects [{}, {}]",
                x.range().lo,
                x.range().hi,
                self.normalization().lo,
                self.normalization().hi
            )));
        }
        Ok(())
    }
}

type Pullback<'a> = Box<dyn Fn(&ImageGrid) -> Result<ImageGrid> + 'a>;

/// `ε_θ(x_t, t)` plus the map `v ↦ (∂ε_θ/∂x_t)ᵀ v`.
pub struct Linearization<'a> {
    pub eps: ImageGrid,
    pullback: Pullback<'a>,
}

impl<'a> Linearization<'a> {
    pub fn new(eps: ImageGrid, pullback: impl Fn(&ImageGrid) -> Result<ImageGrid> + 'a) -> Self {
        Linearization {
            eps,
            pullback: Box::new(pullback),
        }
    }

    pub fn vjp(&self, cotangent: &ImageGrid) -> Result<ImageGrid> {
        self.eps.ensure_same_shape(cotangent)?;
        (self.pullback)(cotangent)
    }
}

/// Predicts `ε̂ ≡ 0`. Under DDIM this reduces encode/decode to pure rescaling.
#[derive(Clone, Debug)]
pub struct ZeroDenoiser {
    schedule: DiffusionSchedule,
}

impl ZeroDenoiser {
    pub fn new(schedule: DiffusionSchedule) -> Self {
        ZeroDenoiser { schedule }
    }
}

impl Denoiser for ZeroDenoiser {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn predict_eps(&self, x_t: &ImageGrid, t: usize) -> Result<ImageGrid> {
        self.schedule.check_step(t as i64, 0)?;
        Ok(ImageGrid::zeros_like(x_t))
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn linearize(&self, x_t: &ImageGrid, t: usize) -> Result<Linearization<'_>> {
        let eps = self.predict_eps(x_t, t)?;
        Ok(Linearization::new(eps, |v| Ok(ImageGrid::zeros_like(v))))
    }
}
