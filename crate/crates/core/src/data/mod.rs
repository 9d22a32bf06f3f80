//! Dataset ingestion, preprocessing, splitting and synthetic phantoms.

mod phantom;
mod preprocess;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use phantom::{
    generate_phantom_pair, Ellipse, PhantomGeometry, PhantomPair, PhantomSpec, LABEL_BACKGROUND, LABEL_CAVITY,
    LABEL_RIM, LABEL_TISSUE,
};
pub use preprocess::{preprocess, MaskingMode, PreprocessConfig};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Annotated center (pixels) and in-plane angle of the alignment axis in
/// degrees, counter-clockwise from the image's horizontal as displayed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub center_row: f64,
    pub center_col: f64,
    pub angle_deg: f64,
}

/// Binary mask, `true` inside.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn load(path: impl AsRef<Path>) -> Result<Mask> {
        let img = ImageGrid::load(path)?;
        Ok(Mask {
            height: img.height(),
            width: img.width(),
            inside: img.data().iter().map(|&v| v > 0.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub name: String,
    pub image: ImageGrid,
    pub pixel_size_mm: f64,
    pub hc_mm: Option<f64>,
    pub mask: Option<Mask>,
    pub alignment: Option<Alignment>,
}

impl AnnotatedImage {
    pub fn new(name: impl Into<String>, image: ImageGrid, pixel_size_mm: f64) -> Result<Self> {
        let name = name.into();
        if !(pixel_size_mm > 0.0 && pixel_size_mm.is_finite()) {
            return Err(Error::Data(format!(
                "{name}: pixel size must be positive, got {pixel_size_mm}"
            )));
        }
        Ok(AnnotatedImage {
            name,
            image,
            pixel_size_mm,
            hc_mm: None,
            mask: None,
            alignment: None,
        })
    }
}

/// One row of the annotations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub filename: String,
    pub pixel_size_mm: f64,
    pub hc_mm: Option<f64>,
    pub center_row: Option<f64>,
    pub center_col: Option<f64>,
    pub angle_deg: Option<f64>,
    /// Mask raster path, relative to the annotations file.
    pub mask: Option<String>,
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::format(path, format!("record {}: {e}", i + 1))))
        .collect()
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl AnnotationRecord {
    /// Loads the raster (and mask) this record describes.
    pub fn load(&self, images_dir: &Path, annotations_dir: &Path) -> Result<AnnotatedImage> {
        let image = ImageGrid::load(images_dir.join(&self.filename))?;
        let mut item = AnnotatedImage::new(&self.filename, image, self.pixel_size_mm)?;
        if let Some(hc) = self.hc_mm {
            if !(hc > 0.0) {
                return Err(Error::Data(format!(
                    "{}: hc_mm must be positive, got {hc}",
                    self.filename
                )));
            }
            item.hc_mm = Some(hc);
        }
        item.alignment = match (self.center_row, self.center_col, self.angle_deg) {
            (Some(r), Some(c), Some(a)) => Some(Alignment {
                center_row: r,
                center_col: c,
                angle_deg: a,
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Data(format!(
                    "{}: center_row, center_col and angle_deg must be given together",
                    self.filename
                )))
            }
        };
        if let Some(m) = &self.mask {
            let mask = Mask::load(annotations_dir.join(m))?;
            if (mask.height, mask.width) != item.image.shape() {
                return Err(Error::Data(format!(
                    "{}: mask is {}x{}, image is {:?}",
                    self.filename,
                    mask.height,
                    mask.width,
                    item.image.shape()
                )));
            }
            item.mask = Some(mask);
        }
        Ok(item)
    }
}

/// Reads `annotations` and loads every listed image from `images_dir`.
pub fn load_dataset(images_dir: impl AsRef<Path>, annotations: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    let annotations = annotations.as_ref();
    let base: PathBuf = annotations.parent().map(Path::to_path_buf).unwrap_or_default();
    read_annotations(annotations)?
        .iter()
        .map(|r| r.load(images_dir.as_ref(), &base))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcFilterOutcome {
    pub kept: Vec<AnnotatedImage>,
    pub missing_hc: usize,
    pub out_of_range: usize,
}

/// Keeps items with `lo ≤ HC ≤ hi`; items without HC are dropped and counted.
pub fn filter_by_hc(items: Vec<AnnotatedImage>, lo: f64, hi: f64) -> Result<HcFilterOutcome> {
    if !(lo < hi) {
        return Err(Error::Config(format!("hc range needs lo < hi, got [{lo}, {hi}]")));
    }
    let mut out = HcFilterOutcome {
        kept: Vec::new(),
        missing_hc: 0,
        out_of_range: 0,
    };
    for item in items {
        match item.hc_mm {
            None => out.missing_hc += 1,
            Some(hc) if hc >= lo && hc <= hi => out.kept.push(item),
            Some(_) => out.out_of_range += 1,
        }
    }
    Ok(out)
}

/// Indices of a seeded shuffled split. `train` holds `⌊N·fraction⌋` items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // guard against 0.9·N landing just below an integer
    let n_train = ((n as f64 * train_fraction) + 1e-9).floor() as usize;
    let test = order.split_off(n_train.min(n));
    Ok(SplitIndices { train: order, test })
}

/// Deterministic shuffled split into `(train, test)`.
pub fn split_dataset<T>(items: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let idx = split_indices(items.len(), train_fraction, seed)?;
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |ix: &[usize]| {
        ix.iter()
            .map(|&i| slots[i].take().expect("indices are disjoint"))
            .collect()
    };
    let train = take(&idx.train);
    let test = take(&idx.test);
    Ok((train, test))
}
