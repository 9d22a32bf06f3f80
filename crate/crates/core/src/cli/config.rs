use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PhantomSpec, PreprocessConfig};
use crate::denoiser::TrainConfig;
use crate::error::{Error, Result};
use crate::image::IntensityRange;
use crate::metrics::HistogramSpec;
use crate::nn::UNetConfig;
use crate::schedule::ScheduleSpec;
use crate::translate::DdicConfig;

/// Top-level run configuration. Relative paths are resolved against the
/// directory holding the configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub phantom: Option<PhantomSection>,
    pub preprocess: Option<PreprocessSection>,
    pub train: Option<TrainSection>,
    pub translate: Option<TranslateSection>,
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    /// Written to the annotations file for every phantom.
    pub pixel_size_mm: f64,
    /// Geometry and rendering. Its `seed` must stay 0: per-item seeds derive
    /// from the global seed.
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 30,
            pixel_size_mm: 4.376,
            spec: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub images: PathBuf,
    pub annotations: PathBuf,
    /// Inclusive head-circumference bounds in mm.
    pub hc_range: Option<[f64; 2]>,
    /// When set, outputs go to `train/` and `test/` instead of `images/`.
    pub train_fraction: Option<f64>,
    pub output: PreprocessConfig,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            images: PathBuf::new(),
            annotations: PathBuf::new(),
            hc_range: None,
            train_fraction: None,
            output: PreprocessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Directory of training rasters (all `.png` files).
    pub data: PathBuf,
    pub schedule: ScheduleSpec,
    pub architecture: UNetConfig,
    pub normalization: IntensityRange,
    /// Optimization settings. `seed` is replaced by the global seed.
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: PathBuf::new(),
            schedule: ScheduleSpec::default(),
            architecture: UNetConfig::small(),
            normalization: IntensityRange::SIGNED_UNIT,
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ddib,
    Ddic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddib => "ddib",
            Method::Ddic => "ddic",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSection {
    pub source_checkpoint: PathBuf,
    pub target_checkpoint: PathBuf,
    /// Directory of source-domain rasters.
    pub inputs: PathBuf,
    pub method: Method,
    /// Keep every n-th latent of the encode (and, for DDIB, decode) pass.
    pub latent_stride: Option<usize>,
    pub ddic: DdicConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodDir {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub source: PathBuf,
    pub methods: Vec<MethodDir>,
    /// JSON map from file name to a list of CNR region pairs.
    pub rois: Option<PathBuf>,
    pub histogram: HistogramSpec,
    pub fid_size: usize,
    pub fid_regularization: Option<f64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            source: PathBuf::new(),
            methods: Vec::new(),
            rois: None,
            histogram: HistogramSpec::default(),
            fid_size: 16,
            fid_regularization: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(out) = self.out.as_mut() {
            resolve(base, out);
        }
        if let Some(p) = self.preprocess.as_mut() {
            resolve(base, &mut p.images);
            resolve(base, &mut p.annotations);
        }
        if let Some(t) = self.train.as_mut() {
            resolve(base, &mut t.data);
        }
        if let Some(t) = self.translate.as_mut() {
            resolve(base, &mut t.source_checkpoint);
            resolve(base, &mut t.target_checkpoint);
            resolve(base, &mut t.inputs);
        }
        if let Some(e) = self.evaluate.as_mut() {
            resolve(base, &mut e.source);
            for m in &mut e.methods {
                resolve(base, &mut m.dir);
            }
            if let Some(r) = e.rois.as_mut() {
                resolve(base, r);
            }
        }
    }
}
