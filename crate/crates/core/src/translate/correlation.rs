use crate::error::{Error, Result};
use crate::image::ImageGrid;

fn centered(x: &ImageGrid) -> (Vec<f64>, f64) {
    let m = x.mean();
    let c: Vec<f64> = x.data().iter().map(|v| v - m).collect();
    let ss = c.iter().map(|v| v * v).sum::<f64>();
    // Centering a constant image can leave rounding residue; treat anything at
    // that level as zero variance.
    let scale = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = (4.0 * f64::EPSILON * scale).powi(2) * x.len() as f64;
    (c, if ss <= floor { 0.0 } else { ss })
}

/// Pearson correlation over all pixels.
pub fn corrcoef(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    Ok(corrcoef_with_grad(a, b)?.0)
}

/// Pearson correlation and its gradient with respect to `b`.
pub fn corrcoef_with_grad(a: &ImageGrid, b: &ImageGrid) -> Result<(f64, ImageGrid)> {
    a.ensure_same_shape(b)?;
    let (ac, saa) = centered(a);
    let (bc, sbb) = centered(b);
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateCorrelation);
    }
    let sab: f64 = ac.iter().zip(&bc).map(|(x, y)| x * y).sum();
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    let r = (sab / (na * nb)).clamp(-1.0, 1.0);
    let grad = ac.iter().zip(&bc).map(|(x, y)| x / (na * nb) - r * y / sbb).collect();
    Ok((r, ImageGrid::new(b.height(), b.width(), grad, b.range())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IntensityRange;

    fn grid(v: &[f64]) -> ImageGrid {
        ImageGrid::new(2, v.len() / 2, v.to_vec(), IntensityRange::UNIT).unwrap()
    }

    #[test]
    fn self_and_affine_images() {
        let a = grid(&[0.3, -1.0, 2.0, 0.7, 0.1, 5.0]);
        assert!((corrcoef(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((corrcoef(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let b = a.map(|v| 2.5 * v - 7.0);
        assert!((corrcoef(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        let b = a.map(|v| -0.1 * v + 3.0);
        assert!((corrcoef(&a, &b).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn hand_computed_case() {
        // centered a = [-1.5,-0.5,0.5,1.5], b = [-1.75,0.25,-0.75,2.25]
        // cov sum = 2.625 + -0.125 + -0.375 + 3.375 = 5.5; ssa = 5, ssb = 8.75
        let r = corrcoef(&grid(&[1.0, 2.0, 3.0, 4.0]), &grid(&[1.0, 3.0, 2.0, 5.0])).unwrap();
        assert!((r - 5.5 / (5.0f64 * 8.75).sqrt()).abs() < 1e-12);
        assert!((r - 0.831_521_840_620_299_9).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let a = grid(&[1.0, 2.0, 3.0, 4.0]);
        let c = grid(&[0.1, 0.1, 0.1, 0.1]);
        assert!(matches!(corrcoef(&a, &c), Err(Error::DegenerateCorrelation)));
        assert!(matches!(corrcoef(&c, &a), Err(Error::DegenerateCorrelation)));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let a = grid(&[0.3, -1.0, 2.0, 0.7, 0.1, 5.0]);
        let b = grid(&[1.1, 0.4, -0.2, 0.9, 2.0, 0.5]);
        let (_, g) = corrcoef_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..b.len() {
            let mut p = b.clone();
            p.data_mut()[i] += h;
            let mut m = b.clone();
            m.data_mut()[i] -= h;
            let fd = (corrcoef(&a, &p).unwrap() - corrcoef(&a, &m).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn gradient_vanishes_at_positive_affine_optimum() {
        let a = grid(&[0.3, -1.0, 2.0, 0.7, 0.1, 5.0]);
        let (r, g) = corrcoef_with_grad(&a, &a.map(|v| 0.5 * v + 1.0)).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!(g.norm() < 1e-12);
    }
}
