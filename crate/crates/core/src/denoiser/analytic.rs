use super::{Denoiser, Linearization};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};
use crate::schedule::DiffusionSchedule;

/// Minimizer of the ε-prediction objective when `x_0 ~ N(m, s²·I)`:
///
/// `ε̂(x_t, t) = √(1−ᾱ_t)·(x_t − √ᾱ_t·m) / (ᾱ_t·s² + 1 − ᾱ_t)`.
pub fn oracle_eps(
    schedule: &DiffusionSchedule,
    x_t: &ImageGrid,
    t: usize,
    mean: &ImageGrid,
    variance: f64,
) -> Result<ImageGrid> {
    let t = schedule.check_step(t as i64, 0)?;
    let ab = schedule.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let denom = ab * variance + 1.0 - ab;
    x_t.zip_map(mean, |x, m| s1 * (x - sa * m) / denom)
}

/// Exact denoiser for Gaussian data with a per-pixel mean field and a scalar variance.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    mean: ImageGrid,
    variance: f64,
    schedule: DiffusionSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: ImageGrid, variance: f64, schedule: DiffusionSchedule) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::Config(format!("variance must be positive, got {variance}")));
        }
        Ok(AnalyticGaussianDenoiser {
            mean,
            variance,
            schedule,
        })
    }

    /// Constant mean `m` over an `h×w` grid in `[-1, 1]` units.
    pub fn constant(
        height: usize,
        width: usize,
        mean: f64,
        variance: f64,
        schedule: DiffusionSchedule,
    ) -> Result<Self> {
        Self::new(
            ImageGrid::filled(height, width, mean, IntensityRange::SIGNED_UNIT),
            variance,
            schedule,
        )
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// The Jacobian `∂ε̂/∂x_t` is this scalar times the identity.
    pub fn jacobian_scale(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        (1.0 - ab).sqrt() / (ab * self.variance + 1.0 - ab)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn predict_eps(&self, x_t: &ImageGrid, t: usize) -> Result<ImageGrid> {
        self.mean.ensure_same_shape(x_t)?;
        oracle_eps(&self.schedule, x_t, t, &self.mean, self.variance)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn linearize(&self, x_t: &ImageGrid, t: usize) -> Result<Linearization<'_>> {
        let eps = self.predict_eps(x_t, t)?;
        let k = self.jacobian_scale(t);
        Ok(Linearization::new(eps, move |v| Ok(v.scale(k))))
    }

    fn normalization(&self) -> IntensityRange {
        self.mean.range()
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        Some(self.mean.shape())
    }
}
