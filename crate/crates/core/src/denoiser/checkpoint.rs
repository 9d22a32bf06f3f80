//! Self-describing checkpoint files.
//!
//! A checkpoint is a JSON document. Float payloads are little-endian `f64`
//! bytes in standard base64 so parameters round-trip bit-exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::NetworkDenoiser;
use super::train::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::image::IntensityRange;
use crate::nn::{Adam, UNet, UNetConfig};
use crate::schedule::ScheduleSpec;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub first_moment: String,
    pub second_moment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_parameters: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub architecture: UNetConfig,
    pub schedule: ScheduleSpec,
    pub normalization: IntensityRange,
    pub image_shape: [usize; 2],
    pub seed: u64,
    pub step: usize,
    pub parameter_count: usize,
    pub parameters: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn from_denoiser(den: &NetworkDenoiser) -> Self {
        let net = den.net();
        let (h, w) = crate::denoiser::Denoiser::image_shape(den).unwrap();
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture: net.config().clone(),
            schedule: crate::denoiser::Denoiser::schedule(den).spec().clone(),
            normalization: crate::denoiser::Denoiser::normalization(den),
            image_shape: [h, w],
            seed: den.seed(),
            step: den.step(),
            parameter_count: net.parameter_count(),
            parameters: encode_f64s(&net.params().flatten()),
            optimizer: None,
            train_config: None,
        }
    }

    /// Snapshot of an in-progress training run, resumable with [`Checkpoint::train_state`].
    pub fn from_train_state(
        state: &TrainState,
        den_meta: (&ScheduleSpec, IntensityRange, (usize, usize)),
        config: &TrainConfig,
    ) -> Self {
        let (schedule, normalization, (h, w)) = den_meta;
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture: state.net.config().clone(),
            schedule: schedule.clone(),
            normalization,
            image_shape: [h, w],
            seed: config.seed,
            step: state.step,
            parameter_count: state.net.parameter_count(),
            parameters: encode_f64s(&state.net.params().flatten()),
            optimizer: Some(OptimizerState {
                lr: state.adam.lr,
                clip_norm: state.adam.clip_norm,
                step: state.adam.step,
                first_moment: encode_f64s(&state.adam.m),
                second_moment: encode_f64s(&state.adam.v),
                ema_parameters: state.ema.as_ref().map(|e| encode_f64s(e)),
            }),
            train_config: Some(config.clone()),
        }
    }

    fn build_net(&self, payload: &str) -> Result<UNet> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.architecture.validate().map_err(Error::Checkpoint)?;
        // Initial values are overwritten; the RNG only shapes the store.
        let mut net = UNet::new(self.architecture.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        if net.parameter_count() != self.parameter_count {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters, checkpoint declares {}",
                net.parameter_count(),
                self.parameter_count
            )));
        }
        let flat = decode_f64s(payload)?;
        net.params_mut().load_flat(&flat).map_err(Error::Checkpoint)?;
        Ok(net)
    }

    /// The denoiser these weights describe. Uses the EMA weights when present.
    pub fn denoiser(&self) -> Result<NetworkDenoiser> {
        let payload = self
            .optimizer
            .as_ref()
            .and_then(|o| o.ema_parameters.as_deref())
            .unwrap_or(&self.parameters);
        let net = self.build_net(payload)?;
        NetworkDenoiser::new(
            net,
            self.schedule.build()?,
            self.normalization,
            (self.image_shape[0], self.image_shape[1]),
            self.seed,
            self.step,
        )
    }

    pub fn train_state(&self) -> Result<TrainState> {
        let opt = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let net = self.build_net(&self.parameters)?;
        let mut adam = Adam::new(net.params(), opt.lr, opt.clip_norm);
        adam.step = opt.step;
        adam.m = decode_f64s(&opt.first_moment)?;
        adam.v = decode_f64s(&opt.second_moment)?;
        if adam.m.len() != net.parameter_count() || adam.v.len() != net.parameter_count() {
            return Err(Error::Checkpoint(
                "optimizer moments do not match parameter count".into(),
            ));
        }
        let ema = opt.ema_parameters.as_deref().map(decode_f64s).transpose()?;
        Ok(TrainState {
            net,
            adam,
            ema,
            step: self.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}
