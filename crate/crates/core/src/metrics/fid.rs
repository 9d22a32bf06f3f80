use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, img: &ImageGrid) -> Result<Vec<f64>>;
}

/// Area-averaged resize to `size × size`, intensities mapped to `[0, 1]`,
/// flattened row-major. Makes the Fréchet distance a pixel-space statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownsampleFlatten {
    pub size: usize,
}

impl Default for DownsampleFlatten {
    fn default() -> Self {
        DownsampleFlatten { size: 16 }
    }
}

/// Overlap weights of output cell `i` with each input index along one axis.
fn box_weights(n_in: usize, n_out: usize, i: usize) -> impl Iterator<Item = (usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(n_in);
    (first..last).filter_map(move |j| {
        let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)) / scale;
        (w > 0.0).then_some((j, w))
    })
}

impl FeatureExtractor for DownsampleFlatten {
    fn dim(&self) -> usize {
        self.size * self.size
    }

    fn embed(&self, img: &ImageGrid) -> Result<Vec<f64>> {
        let unit = img.renormalized(IntensityRange::UNIT);
        let (h, w) = img.shape();
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (rr, wr) in box_weights(h, n, r) {
                    for (cc, wc) in box_weights(w, n, c) {
                        acc += wr * wc * unit.get(rr, cc);
                    }
                }
                out.push(acc);
            }
        }
        Ok(out)
    }
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(Error::Numeric(format!(
            "need at least 2 non-empty feature vectors, got {n}"
        )));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Numeric("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric PSD square root; eigenvalues below zero are clipped.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// Without `regularization` each set needs more samples than feature
/// dimensions; with it, `ε·I` is added to both covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>], regularization: Option<f64>) -> Result<f64> {
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    let d = mu_a.len();
    if mu_b.len() != d {
        return Err(Error::Numeric(format!("feature sizes differ: {d} vs {}", mu_b.len())));
    }
    match regularization {
        Some(eps) if eps > 0.0 => {
            for i in 0..d {
                cov_a[(i, i)] += eps;
                cov_b[(i, i)] += eps;
            }
        }
        _ => {
            if a.len() <= d || b.len() <= d {
                return Err(Error::Numeric(format!(
                    "covariance is singular with {} and {} samples in {d} dimensions; enable regularization",
                    a.len(),
                    b.len()
                )));
            }
        }
    }
    let root_a = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let cross = sqrt_psd(inner).trace();
    let diff = &mu_a - &mu_b;
    let fd = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

pub fn fid(
    set_a: &[ImageGrid],
    set_b: &[ImageGrid],
    fx: &dyn FeatureExtractor,
    regularization: Option<f64>,
) -> Result<f64> {
    let embed = |set: &[ImageGrid]| set.iter().map(|img| fx.embed(img)).collect::<Result<Vec<_>>>();
    frechet_distance(&embed(set_a)?, &embed(set_b)?, regularization)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageGrid::from_fn(
            4,
            4,
            IntensityRange::UNIT,
            |r, c| if r < 2 && c < 2 { 1.0 } else { 0.0 },
        );
        let f = DownsampleFlatten { size: 2 }.embed(&img).unwrap();
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.0]);
        let same = DownsampleFlatten { size: 4 }.embed(&img).unwrap();
        assert_eq!(same, img.data().to_vec());
    }

    #[test]
    fn downsample_non_divisible_preserves_mean() {
        let img = ImageGrid::from_fn(7, 5, IntensityRange::UNIT, |r, c| ((r * 3 + c) % 4) as f64 / 3.0);
        let f = DownsampleFlatten { size: 3 }.embed(&img).unwrap();
        let m = f.iter().sum::<f64>() / 9.0;
        assert!((m - img.mean()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_two_dimensional_case() {
        // diagonal covariances: FD = |Δμ|² + Σ (σa − σb)²
        let a: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![0.0, -2.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![3.0 * v[0] + 1.0, v[1]]).collect();
        let fd = frechet_distance(&a, &b, None).unwrap();
        let sa = (2.0f64 / 3.0).sqrt();
        let want = 1.0 + (3.0 * sa - sa).powi(2);
        assert!((fd - want).abs() < 1e-12, "{fd} vs {want}");
    }

    #[test]
    fn singular_covariance_needs_regularization() {
        let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 1.0, 2.0 * i as f64]).collect();
        assert!(matches!(frechet_distance(&a, &a, None), Err(Error::Numeric(_))));
        assert!(frechet_distance(&a, &a, Some(1e-6)).unwrap() < 1e-6);
    }
}
