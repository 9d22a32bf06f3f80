//! DDIB bridging and correlation-guided (DDIC) translation.

mod correlation;
mod median;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use correlation::{corrcoef, corrcoef_with_grad};
pub use median::{median_filter, median_filter_routed, median_pullback};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::sampler::{ddim_coefficients, ddim_step, decode, encode};

/// How the latent gradient is turned into an update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// `y ← y − lr·g`.
    #[default]
    Raw,
    /// `y ← y − lr·g/‖g‖`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdicConfig {
    /// Step size of the single gradient step per timestep. Zero disables guidance.
    pub lr: f64,
    pub median_kernel: usize,
    /// Expected step count; `None` accepts whatever the denoisers were built with.
    pub steps: Option<usize>,
    pub gradient: GradientMode,
    /// Keep one [`DdicStepTrace`] per step.
    pub trace: bool,
}

impl Default for DdicConfig {
    fn default() -> Self {
        DdicConfig {
            lr: 3.0,
            median_kernel: 3,
            steps: None,
            gradient: GradientMode::Raw,
            trace: true,
        }
    }
}

impl DdicConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.median_kernel == 0 || self.median_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "median_kernel must be odd and at least 1, got {}",
                self.median_kernel
            )));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one reverse step. Correlation fields are `None` when either
/// filtered image had zero variance, in which case the update was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdicStepTrace {
    pub t: usize,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub corr_before: Option<f64>,
    pub corr_after: Option<f64>,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Writes one JSON object per line.
pub fn write_trace(trace: &[DdicStepTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in trace {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::format(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct DdicStep {
    pub x_prev: ImageGrid,
    pub y_prev: ImageGrid,
    pub trace: DdicStepTrace,
}

fn degenerate_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateCorrelation) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Guidance objective at `y_t` and its latent gradient.
#[derive(Clone, Debug)]
pub struct Guidance {
    /// The unguided DDIM estimate `ŷ_{t−1}`.
    pub y_hat: ImageGrid,
    /// `corr(median(x_{t−1}), median(ŷ_{t−1}))`; `None` when undefined.
    pub corr: Option<f64>,
    /// `∂(−corr)/∂y_t`; `None` when the correlation is undefined.
    pub grad: Option<ImageGrid>,
}

/// `−corr(median(x_prev), median(ŷ_{t−1}(y_t)))` without the gradient.
pub fn guidance_loss(
    x_prev: &ImageGrid,
    y_t: &ImageGrid,
    t: usize,
    den_dst: &dyn Denoiser,
    median_kernel: usize,
) -> Result<f64> {
    let y_hat = ddim_step(y_t, t, -1, den_dst)?;
    let r = corrcoef(
        &median_filter(x_prev, median_kernel)?,
        &median_filter(&y_hat, median_kernel)?,
    )?;
    Ok(-r)
}

/// Loss and latent gradient of the guidance objective. The median filter is
/// differentiated through the pixel it selects.
pub fn guidance_gradient(
    x_prev: &ImageGrid,
    y_t: &ImageGrid,
    t: usize,
    den_dst: &dyn Denoiser,
    median_kernel: usize,
) -> Result<Guidance> {
    x_prev.ensure_same_shape(y_t)?;
    let schedule = den_dst.schedule();
    let t = schedule.check_step(t as i64, 1)?;
    let lin = den_dst.linearize(y_t, t)?;
    let (a, b) = ddim_coefficients(schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let y_hat = y_t.lincomb(a, &lin.eps, b)?;

    let x_med = median_filter(x_prev, median_kernel)?;
    let (y_med, routes) = median_filter_routed(&y_hat, median_kernel)?;
    match corrcoef_with_grad(&x_med, &y_med) {
        Ok((r, dr)) => {
            // loss = −corr, so ∂loss/∂median(ŷ) = −∂corr/∂median(ŷ)
            let g_hat = median_pullback(&routes, &dr.scale(-1.0))?;
            let g = g_hat.lincomb(a, &lin.vjp(&g_hat)?, b)?;
            Ok(Guidance {
                y_hat,
                corr: Some(r),
                grad: Some(g),
            })
        }
        Err(Error::DegenerateCorrelation) => Ok(Guidance {
            y_hat,
            corr: None,
            grad: None,
        }),
        Err(e) => Err(e),
    }
}

/// One guided reverse step from `t` to `t − 1`.
///
/// The source branch `x` follows its own ODE and acts as a fixed reference. The
/// target latent `y_t` receives exactly one gradient step on
/// `−corr(median(x_{t−1}), median(ŷ_{t−1}(y_t)))`, after which `y_{t−1}` is
/// recomputed from the updated `y_t`.
pub fn ddic_step(
    x_t: &ImageGrid,
    y_t: &ImageGrid,
    t: usize,
    den_src: &dyn Denoiser,
    den_dst: &dyn Denoiser,
    cfg: &DdicConfig,
) -> Result<DdicStep> {
    x_t.ensure_same_shape(y_t)?;
    let t = den_dst.schedule().check_step(t as i64, 1)?;
    let x_prev = ddim_step(x_t, t, -1, den_src)?;
    let k = cfg.median_kernel;
    let Guidance {
        y_hat,
        corr: corr_before,
        grad,
    } = guidance_gradient(&x_prev, y_t, t, den_dst, k)?;
    let grad_norm = grad.as_ref().map_or(0.0, |g| g.norm());
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            what: "latent gradient".into(),
        });
    }

    let step = match (&grad, cfg.gradient) {
        _ if cfg.lr == 0.0 || grad_norm == 0.0 => None,
        (Some(g), GradientMode::Raw) => Some(g.scale(cfg.lr)),
        (Some(g), GradientMode::Normalized) => Some(g.scale(cfg.lr / grad_norm)),
        (None, _) => None,
    };
    let (y_prev, corr_after) = match step {
        None => (y_hat, corr_before),
        Some(delta) => {
            let y_new = y_t.lincomb(1.0, &delta, -1.0)?;
            let y_prev = ddim_step(&y_new, t, -1, den_dst)?;
            let x_med = median_filter(&x_prev, k)?;
            let r = degenerate_to_none(corrcoef(&x_med, &median_filter(&y_prev, k)?))?;
            (y_prev, r)
        }
    };
    if !y_prev.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            what: "target latent".into(),
        });
    }
    Ok(DdicStep {
        x_prev,
        y_prev,
        trace: DdicStepTrace {
            t,
            loss_before: corr_before.map(|r| -r),
            loss_after: corr_after.map(|r| -r),
            corr_before,
            corr_after,
            grad_norm,
            skipped: grad.is_none(),
        },
    })
}

fn check_pair(den_src: &dyn Denoiser, den_dst: &dyn Denoiser) -> Result<()> {
    if !den_src.schedule().same_as(den_dst.schedule()) {
        return Err(Error::Config(
            "source and target denoisers use different schedules".into(),
        ));
    }
    if den_src.normalization() != den_dst.normalization() {
        return Err(Error::Config(
            "source and target denoisers use different intensity normalizations".into(),
        ));
    }
    Ok(())
}

/// Encode with the source model, decode with the target model.
pub fn translate_ddib(x_src: &ImageGrid, den_src: &dyn Denoiser, den_dst: &dyn Denoiser) -> Result<ImageGrid> {
    check_pair(den_src, den_dst)?;
    den_dst.check_input(x_src)?;
    decode(&encode(x_src, den_src)?, den_dst)
}

#[derive(Clone, Debug)]
pub struct DdicOutcome {
    pub image: ImageGrid,
    pub trace: Vec<DdicStepTrace>,
}

fn check_ddic(den_src: &dyn Denoiser, den_dst: &dyn Denoiser, cfg: &DdicConfig) -> Result<()> {
    cfg.validate()?;
    check_pair(den_src, den_dst)?;
    let steps = den_dst.schedule().steps();
    if let Some(want) = cfg.steps {
        if want != steps {
            return Err(Error::Config(format!(
                "configured for {want} steps but the denoisers use {steps}"
            )));
        }
    }
    if !den_dst.is_differentiable() {
        return Err(Error::NotDifferentiable);
    }
    Ok(())
}

/// Correlation-guided translation from the shared latent `encode(x_src)`.
pub fn translate_ddic(
    x_src: &ImageGrid,
    den_src: &dyn Denoiser,
    den_dst: &dyn Denoiser,
    cfg: &DdicConfig,
) -> Result<DdicOutcome> {
    check_ddic(den_src, den_dst, cfg)?;
    den_dst.check_input(x_src)?;
    ddic_from_latent(&encode(x_src, den_src)?, den_src, den_dst, cfg)
}

/// The guided reverse pass alone, starting both branches at `latent`.
pub fn ddic_from_latent(
    latent: &ImageGrid,
    den_src: &dyn Denoiser,
    den_dst: &dyn Denoiser,
    cfg: &DdicConfig,
) -> Result<DdicOutcome> {
    check_ddic(den_src, den_dst, cfg)?;
    den_dst.check_input(latent)?;
    let steps = den_dst.schedule().steps();
    let mut x = latent.clone();
    let mut y = latent.clone();
    let mut trace = Vec::with_capacity(if cfg.trace { steps } else { 0 });
    for t in (1..=steps).rev() {
        let step = ddic_step(&x, &y, t, den_src, den_dst, cfg)?;
        x = step.x_prev;
        y = step.y_prev;
        if cfg.trace {
            trace.push(step.trace);
        }
    }
    Ok(DdicOutcome { image: y, trace })
}
