//! Image-similarity metrics, set-level statistics and the evaluation report.

mod fid;
mod report;
mod stats;

use serde::{Deserialize, Serialize};

pub use fid::{fid, frechet_distance, DownsampleFlatten, FeatureExtractor};
pub use report::{GroupComparison, ImageRow, MethodSummary, MetricSummary, MetricsReport, ReportInput};
pub use stats::{compare_groups, summarize, Summary, WelchTest};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Value range used to bin one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinRange {
    /// Each image's own minimum and maximum.
    #[default]
    PerImage,
    /// Fixed bounds; values outside fall into the edge bins.
    Fixed { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins: usize,
    pub range: BinRange,
    pub log_base: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins: 64,
            range: BinRange::PerImage,
            log_base: 2.0,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Histogram(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.log_base > 0.0 && self.log_base != 1.0 && self.log_base.is_finite()) {
            return Err(Error::Histogram(format!("invalid log base {}", self.log_base)));
        }
        if let BinRange::Fixed { lo, hi } = self.range {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Histogram(format!("degenerate bin range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Bin index of every pixel.
    pub fn bin_indices(&self, img: &ImageGrid) -> Result<Vec<usize>> {
        self.validate()?;
        let (lo, hi) = match self.range {
            BinRange::PerImage => img.min_max(),
            BinRange::Fixed { lo, hi } => (lo, hi),
        };
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Histogram(format!("degenerate intensity range [{lo}, {hi}]")));
        }
        let b = self.bins;
        let scale = b as f64 / (hi - lo);
        Ok(img
            .data()
            .iter()
            .map(|&v| (((v - lo) * scale).floor().max(0.0) as usize).min(b - 1))
            .collect())
    }
}

fn plogp_sum(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Shannon entropy of the binned intensities.
pub fn entropy(x: &ImageGrid, spec: &HistogramSpec) -> Result<f64> {
    let ix = spec.bin_indices(x)?;
    let mut counts = vec![0u64; spec.bins];
    for i in ix {
        counts[i] += 1;
    }
    Ok(plogp_sum(counts.into_iter(), x.len() as f64) / spec.log_base.ln())
}

/// Mutual information of the joint intensity histogram, `H(X) + H(Y) − H(X, Y)`.
pub fn mutual_information(x: &ImageGrid, y: &ImageGrid, spec: &HistogramSpec) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let ix = spec.bin_indices(x)?;
    let iy = spec.bin_indices(y)?;
    let b = spec.bins;
    let mut joint = vec![0u64; b * b];
    let mut px = vec![0u64; b];
    let mut py = vec![0u64; b];
    for (&i, &j) in ix.iter().zip(&iy) {
        joint[i * b + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for i in 0..b {
        for j in 0..b {
            let c = joint[i * b + j];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * ((c as f64 * n) / (px[i] as f64 * py[j] as f64)).ln();
            }
        }
    }
    Ok((mi / spec.log_base.ln()).max(0.0))
}

/// PSNR in dB between the 8-bit quantizations of `a` and `b` (peak 255).
/// Identical quantizations give `f64::INFINITY`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(psnr_u8(&a.to_u8_levels(), &b.to_u8_levels()))
}

pub fn psnr_u8(a: &[u8], b: &[u8]) -> f64 {
    let sse: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return f64::INFINITY;
    }
    let mse = sse as f64 / a.len() as f64;
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.height
            && o.row < self.row + self.height
            && self.col < o.col + o.width
            && o.col < self.col + self.width
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= h && self.col + self.width <= w
    }

    /// Population mean and variance of the pixels inside.
    pub fn moments(&self, img: &ImageGrid) -> (f64, f64) {
        let n = (self.height * self.width) as f64;
        let vals = || {
            (self.row..self.row + self.height)
                .flat_map(move |r| (self.col..self.col + self.width).map(move |c| img.get(r, c)))
        };
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub roi: Rect,
    pub background: Rect,
}

impl RoiSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (name, r) in [("roi", &self.roi), ("background", &self.background)] {
            if !r.fits(height, width) {
                return Err(Error::Config(format!(
                    "{name} rectangle {r:?} is empty or outside the {height}x{width} image"
                )));
            }
        }
        if self.roi.overlaps(&self.background) {
            return Err(Error::Config("roi and background rectangles overlap".into()));
        }
        Ok(())
    }
}

/// Contrast-to-noise ratio `|μ_roi − μ_bg| / √(σ²_roi + σ²_bg)` with population variances.
pub fn cnr(img: &ImageGrid, spec: &RoiSpec) -> Result<f64> {
    spec.validate(img.height(), img.width())?;
    let (m1, v1) = spec.roi.moments(img);
    let (m2, v2) = spec.background.moments(img);
    let denom = (v1 + v2).sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroDenominator("roi and background are both constant".into()));
    }
    Ok((m1 - m2).abs() / denom)
}
