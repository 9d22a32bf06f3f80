use ddic::metrics::{
    cnr, compare_groups, entropy, fid, frechet_distance, mutual_information, psnr, DownsampleFlatten, HistogramSpec,
    Rect, RoiSpec,
};
use ddic::{ImageGrid, IntensityRange};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn grid(h: usize, w: usize, data: Vec<f64>) -> ImageGrid {
    ImageGrid::new(h, w, data, IntensityRange::UNIT).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageGrid {
    grid(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
}

#[test]
fn independent_noise_has_small_mi() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (x, y) = (uniform(&mut rng, 100, 100), uniform(&mut rng, 100, 100));
    let spec = HistogramSpec {
        bins: 16,
        ..HistogramSpec::default()
    };
    let mi = mutual_information(&x, &y, &spec).unwrap();
    assert!(mi < 0.05, "{mi}");
}

#[test]
fn self_mi_is_the_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = uniform(&mut rng, 32, 32);
    let spec = HistogramSpec::default();
    let mi = mutual_information(&x, &x, &spec).unwrap();
    assert!((mi - entropy(&x, &spec).unwrap()).abs() < 1e-12);
}

#[test]
fn psnr_matches_an_independent_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (a, b) = (uniform(&mut rng, 20, 30), uniform(&mut rng, 20, 30));
    let (qa, qb) = (a.to_u8_levels(), b.to_u8_levels());
    let mse = qa
        .iter()
        .zip(&qb)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / qa.len() as f64;
    let expected = 10.0 * (255.0f64 * 255.0 / mse).log10();
    assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn fid_of_unit_gaussians_two_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut draw = |shift: f64| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![z + shift]
            })
            .collect()
    };
    let (a, b) = (draw(0.0), draw(2.0));
    let d = frechet_distance(&a, &b, None).unwrap();
    assert!((d - 4.0).abs() < 0.1, "{d}");
    assert!((d - frechet_distance(&b, &a, None).unwrap()).abs() < 1e-9);
    assert!(frechet_distance(&a, &a, None).unwrap() < 1e-6);
}

#[test]
fn fid_of_an_image_set_with_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let set: Vec<_> = (0..40).map(|_| uniform(&mut rng, 8, 8)).collect();
    let fx = DownsampleFlatten { size: 4 };
    assert!(fid(&set, &set, &fx, None).unwrap() < 1e-6);
    // Singular covariance without regularization must be reported, not papered over.
    let few = &set[..5];
    assert!(fid(few, few, &fx, None).is_err());
    assert!(fid(few, few, &fx, Some(1e-6)).unwrap() < 1e-6);
}

#[test]
fn cnr_of_equal_means_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let img = grid(10, 20, (0..200).map(|_| 0.5 + 1e-3 * rng.random::<f64>()).collect());
    let spec = RoiSpec {
        roi: Rect::new(0, 0, 10, 10),
        background: Rect::new(0, 10, 10, 10),
    };
    assert!(cnr(&img, &spec).unwrap().abs() < 0.5);
    let flat = grid(10, 20, vec![0.5; 200]);
    assert!(cnr(&flat, &spec).is_err());
}

#[test]
fn welch_identical_and_separated_groups() {
    let g = [1.0, 2.5, 3.0, 4.2, 0.7];
    let same = compare_groups(&g, &g).unwrap();
    assert_eq!(same.t, 0.0);
    assert!((same.p - 1.0).abs() < 1e-12);
    let a = [0.0, 1e-6, -1e-6, 2e-6];
    let b = [1.0, 1.0 + 1e-6, 1.0 - 1e-6, 1.0 + 2e-6];
    assert!(compare_groups(&a, &b).unwrap().p < 1e-6);
}

fn levels_image(levels: &[u8]) -> ImageGrid {
    let mut data: Vec<f64> = levels.iter().map(|&v| v as f64).collect();
    // Pin the range so that every level sits away from a bin edge.
    data[0] = 0.0;
    data[1] = 15.0;
    ImageGrid::new(8, 8, data, IntensityRange::U8).unwrap()
}

proptest! {
    #[test]
    fn mi_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, 16, 16);
        let y = x.zip_map(&uniform(&mut rng, 16, 16), |a, b| a + 0.5 * b).unwrap();
        let spec = HistogramSpec::default();
        let (xy, yx) = (mutual_information(&x, &y, &spec).unwrap(), mutual_information(&y, &x, &spec).unwrap());
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(xy >= 0.0);
    }

    #[test]
    fn mi_survives_monotone_rescaling(
        xs in prop::collection::vec(0u8..16, 64),
        ys in prop::collection::vec(0u8..16, 64),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let spec = HistogramSpec { bins: 16, ..HistogramSpec::default() };
        let (x, y) = (levels_image(&xs), levels_image(&ys));
        let base = mutual_information(&x, &y, &spec).unwrap();
        let (x2, y2) = (x.map(|v| a * v + b), y.map(|v| a * v + b));
        prop_assert!((mutual_information(&x2, &y2, &spec).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = uniform(&mut rng, 16, 16).map(|v| 0.25 + 0.5 * v);
        let noise = uniform(&mut rng, 16, 16).map(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.02, 0.05, 0.1, 0.2, 0.4] {
            // Fixed intensity range so the quantization grid stays put.
            let noisy = base.lincomb(1.0, &noise, amp).unwrap();
            let pinned = |img: &ImageGrid| {
                let mut d = img.data().to_vec();
                d.push(-1.0);
                d.push(2.0);
                grid(1, d.len(), d)
            };
            let p = psnr(&pinned(&base), &pinned(&noisy)).unwrap();
            prop_assert!(p < last, "amp {}: {} >= {}", amp, p, last);
            last = p;
        }
    }

    #[test]
    fn cnr_ignores_affine_intensity_changes(seed in any::<u64>(), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = uniform(&mut rng, 12, 12);
        let spec = RoiSpec { roi: Rect::new(1, 1, 4, 4), background: Rect::new(6, 6, 5, 5) };
        let c = cnr(&img, &spec).unwrap();
        let c2 = cnr(&img.map(|v| a * v + b), &spec).unwrap();
        prop_assert!((c - c2).abs() <= 1e-9 * c.abs().max(1.0));
    }
}
