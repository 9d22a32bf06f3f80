use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    Off,
    /// Apply the mask when the item has one.
    #[default]
    IfPresent,
    /// Every item must carry a mask.
    Required,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f64,
    pub masking: MaskingMode,
    pub output_range: IntensityRange,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            height: 128,
            width: 128,
            pixel_size_mm: 1.094,
            masking: MaskingMode::IfPresent,
            output_range: IntensityRange::SIGNED_UNIT,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "output size {}x{} is empty",
                self.height, self.width
            )));
        }
        if !(self.pixel_size_mm > 0.0 && self.pixel_size_mm.is_finite()) {
            return Err(Error::Config(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_mm
            )));
        }
        IntensityRange::new(self.output_range.lo, self.output_range.hi)?;
        Ok(())
    }
}

/// Bilinear sample; neighbours outside the grid read as `pad`.
fn bilinear(data: &[f64], h: usize, w: usize, r: f64, c: f64, pad: f64) -> f64 {
    if !(r > -1.0 && c > -1.0 && r < h as f64 && c < w as f64) {
        return pad;
    }
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |rr: isize, cc: isize| {
        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
            pad
        } else {
            data[rr as usize * w + cc as usize]
        }
    };
    let top = (1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1);
    let bottom = (1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1);
    (1.0 - fr) * top + fr * bottom
}

/// Masks, rotates the annotated axis to horizontal, recenters on the
/// annotated center, rescales to the target pixel size, crops or pads to the
/// target grid and maps intensities onto the configured range.
///
/// Masked-out and padded pixels take the low end of the input range.
pub fn preprocess(item: &AnnotatedImage, cfg: &PreprocessConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    let align = item.alignment.ok_or_else(|| {
        Error::Data(format!(
            "{}: missing alignment (center_row, center_col, angle_deg)",
            item.name
        ))
    })?;
    let src = &item.image;
    let (h, w) = src.shape();
    let low = src.range().lo;
    let mask = match (cfg.masking, &item.mask) {
        (MaskingMode::Off, _) => None,
        (_, Some(m)) => Some(m),
        (MaskingMode::IfPresent, None) => None,
        (MaskingMode::Required, None) => {
            return Err(Error::Data(format!("{}: missing mask", item.name)));
        }
    };
    let masked: std::borrow::Cow<[f64]> = match mask {
        None => src.data().into(),
        Some(m) => {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Data(format!("{}: mask shape differs from image", item.name)));
            }
            src.data()
                .iter()
                .zip(&m.inside)
                .map(|(&v, &inside)| if inside { v } else { low })
                .collect::<Vec<_>>()
                .into()
        }
    };

    let scale = cfg.pixel_size_mm / item.pixel_size_mm;
    let theta = align.angle_deg.to_radians();
    let (sin, cos) = if align.angle_deg == 0.0 {
        (0.0, 1.0)
    } else {
        theta.sin_cos()
    };
    let (oy, ox) = ((cfg.height as f64 - 1.0) / 2.0, (cfg.width as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for i in 0..cfg.height {
        let dy = i as f64 - oy;
        for j in 0..cfg.width {
            let dx = j as f64 - ox;
            // the output's horizontal axis is the annotated axis, which points
            // up-right on screen for positive angles
            let c = align.center_col + scale * (dx * cos + dy * sin);
            let r = align.center_row + scale * (dy * cos - dx * sin);
            out.push(bilinear(&masked, h, w, r, c, low));
        }
    }
    Ok(ImageGrid::new(cfg.height, cfg.width, out, src.range())?.renormalized(cfg.output_range))
}
