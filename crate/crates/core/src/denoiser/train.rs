//! Stochastic minimization of `E‖ε − ε_θ(√ᾱ_t·x0 + √(1−ᾱ_t)·ε, t)‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::NetworkDenoiser;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Adam, Tensor, UNet, UNetConfig};
use crate::schedule::DiffusionSchedule;

/// Stream id reserved for weight initialization; batch sampling uses the step index.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Random horizontal flips.
    pub hflip: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Exponential moving average of parameters; `None` disables it.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 2e-3,
            steps: 2000,
            seed: 0,
            checkpoint_interval: 500,
            hflip: false,
            grad_clip: Some(1.0),
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based count of completed optimization steps.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: UNet,
    pub adam: Adam,
    pub ema: Option<Vec<f64>>,
    /// Completed steps.
    pub step: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub denoiser: NetworkDenoiser,
    pub state: TrainState,
    pub loss_trace: Vec<LossRecord>,
}

/// Mean loss over the first and last `window` records.
pub fn smoothed_endpoints(trace: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.min(trace.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..w]), mean(&trace[trace.len() - w..])))
}

fn check_dataset(dataset: &[ImageGrid], arch: &UNetConfig) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Data("training dataset is empty".into()))?;
    for (i, img) in dataset.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Data(format!(
                "image {i} is {:?}, expected {:?}",
                img.shape(),
                first.shape()
            )));
        }
        if img.range() != first.range() {
            return Err(Error::Data(format!(
                "image {i} has a different intensity normalization"
            )));
        }
    }
    let m = arch.spatial_multiple();
    if first.height() % m != 0 || first.width() % m != 0 {
        return Err(Error::Data(format!(
            "image size {:?} must be a multiple of {m} for this architecture",
            first.shape()
        )));
    }
    Ok(())
}

pub fn initial_state(arch: &UNetConfig, config: &TrainConfig) -> Result<TrainState> {
    arch.validate().map_err(Error::Config)?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let net = UNet::new(arch.clone(), &mut rng);
    let adam = Adam::new(net.params(), config.learning_rate, config.grad_clip);
    let ema = config.ema_decay.map(|_| net.params().flatten());
    Ok(TrainState {
        net,
        adam,
        ema,
        step: 0,
    })
}

/// Train from scratch to `config.steps`.
pub fn train_denoiser(
    dataset: &[ImageGrid],
    schedule: &DiffusionSchedule,
    arch: &UNetConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_denoiser_with(dataset, schedule, arch, config, None, None, &mut |_, _| Ok(()))
}

/// Full control: optional resume state, an early stop (completed-step count) and
/// a callback invoked every `checkpoint_interval` completed steps with the
/// state and the loss records of this call.
pub fn train_denoiser_with(
    dataset: &[ImageGrid],
    schedule: &DiffusionSchedule,
    arch: &UNetConfig,
    config: &TrainConfig,
    resume: Option<TrainState>,
    stop_at: Option<usize>,
    on_checkpoint: &mut dyn FnMut(&TrainState, &[LossRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, arch)?;
    let mut state = match resume {
        Some(s) => {
            if s.net.config() != arch {
                return Err(Error::Config("resume state has a different architecture".into()));
            }
            s
        }
        None => initial_state(arch, config)?,
    };
    let (h, w) = dataset[0].shape();
    let hw = h * w;
    let range = dataset[0].range();
    let big_t = schedule.steps();
    let bsz = config.batch_size;
    let end = stop_at.map_or(config.steps, |s| s.min(config.steps));
    let mut trace = Vec::with_capacity(end.saturating_sub(state.step));

    while state.step < end {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(state.step as u64);
        let mut xt = Vec::with_capacity(bsz * hw);
        let mut target = Vec::with_capacity(bsz * hw);
        let mut ts = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            let img = &dataset[rng.random_range(0..dataset.len())];
            let flip = config.hflip && rng.random_bool(0.5);
            let t = rng.random_range(1..=big_t);
            let ab = schedule.alpha_bar(t);
            let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
            for r in 0..h {
                for c in 0..w {
                    let x0 = if flip { img.get(r, w - 1 - c) } else { img.get(r, c) };
                    let e: f64 = rng.sample(StandardNormal);
                    xt.push(sa * x0 + s1 * e);
                    target.push(e);
                }
            }
            ts.push(t as f64);
        }

        let (graph, _, out) = state.net.forward(Tensor::from_vec([bsz, 1, h, w], xt), &ts, false);
        let pred = graph.value(out);
        let norm = (bsz * hw) as f64;
        let mut loss = 0.0;
        let mut seed = Tensor::zeros(pred.shape);
        for ((s, &p), &e) in seed.data.iter_mut().zip(&pred.data).zip(&target) {
            let d = p - e;
            loss += d * d;
            *s = 2.0 * d / norm;
        }
        loss /= norm;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: state.step + 1,
                loss,
            });
        }
        let grads = graph.backward(out, seed);
        drop(graph);
        let grad_norm = state.adam.update(state.net.params_mut(), &grads.params);
        if let (Some(ema), Some(d)) = (state.ema.as_mut(), config.ema_decay) {
            let mut k = 0;
            for t in state.net.params().tensors() {
                for &v in &t.data {
                    ema[k] = d * ema[k] + (1.0 - d) * v;
                    k += 1;
                }
            }
        }
        state.step += 1;
        trace.push(LossRecord {
            step: state.step,
            loss,
            grad_norm,
        });
        if state.step % config.checkpoint_interval == 0 {
            on_checkpoint(&state, &trace)?;
        }
    }

    let mut net = state.net.clone();
    if let Some(ema) = &state.ema {
        net.params_mut().load_flat(ema).map_err(Error::Checkpoint)?;
    }
    let denoiser = NetworkDenoiser::new(net, schedule.clone(), range, (h, w), config.seed, state.step)?;
    Ok(TrainOutcome {
        denoiser,
        state,
        loss_trace: trace,
    })
}
