use ddic::denoiser::{AnalyticGaussianDenoiser, Denoiser};
use ddic::sampler::{ddim_step, ddpm_sample, decode, encode};
use ddic::schedule::DiffusionSchedule;
use ddic::{ImageGrid, IntensityRange};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageGrid {
    let data = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    ImageGrid::new(h, w, data, IntensityRange::SIGNED_UNIT).unwrap()
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// `|a − b|` in units of the standard error of a two-sample difference.
fn z_scores(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let z_mean = (ma - mb).abs() / (va / na + vb / nb).sqrt();
    let z_var = (va - vb).abs() / (2.0 * va * va / (na - 1.0) + 2.0 * vb * vb / (nb - 1.0)).sqrt();
    (z_mean, z_var)
}

#[test]
fn iterated_forward_steps_match_the_marginal() {
    let schedule = DiffusionSchedule::cosine(10, 0.008).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // 10^5 independent chains: every pixel of ten 100×100 grids.
    let x0 = ImageGrid::filled(100, 100, 0.7, IntensityRange::SIGNED_UNIT);
    let mut chains: Vec<ImageGrid> = vec![x0.clone(); 10];
    for t in 1..=10 {
        let mut iterated = Vec::new();
        let mut direct = Vec::new();
        for c in chains.iter_mut() {
            *c = schedule.q_step(c, t, &noise(&mut rng, 100, 100)).unwrap();
            iterated.extend_from_slice(c.data());
            direct.extend_from_slice(schedule.q_sample(&x0, t, &noise(&mut rng, 100, 100)).unwrap().data());
        }
        let (zm, zv) = z_scores(&iterated, &direct);
        assert!(zm < 4.0 && zv < 4.0, "t={t}: mean z {zm}, variance z {zv}");
    }
}

#[test]
fn ancestral_sampling_recovers_data_moments() {
    let schedule = DiffusionSchedule::cosine(1000, 0.008).unwrap();
    let (mean, var) = (0.3, 0.25);
    let den = AnalyticGaussianDenoiser::constant(100, 100, mean, var, schedule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let start = noise(&mut rng, 100, 100);
    let x = ddpm_sample(&start, &den, &mut rng).unwrap();
    let (m, v) = moments(x.data());
    let n = x.len() as f64;
    assert!((m - mean).abs() < 4.0 * (var / n).sqrt(), "mean {m}");
    assert!((v - var).abs() < 4.0 * var * (2.0 / (n - 1.0)).sqrt(), "variance {v}");
}

fn relative_roundtrip_error(steps: usize) -> f64 {
    let schedule = DiffusionSchedule::cosine(steps, 0.008).unwrap();
    let den = AnalyticGaussianDenoiser::constant(16, 16, 0.1, 0.2, schedule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = noise(&mut rng, 16, 16).map(|z| 0.1 + 0.2f64.sqrt() * z);
    let back = decode(&encode(&x0, &den).unwrap(), &den).unwrap();
    back.lincomb(1.0, &x0, -1.0).unwrap().norm() / x0.norm()
}

#[test]
fn ddim_roundtrip_error_shrinks_with_more_steps() {
    let errs: Vec<f64> = [100, 300, 1000].iter().map(|&t| relative_roundtrip_error(t)).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 1e-2, "{errs:?}");
}

/// For Gaussian data the probability-flow ODE keeps
/// `z = (x_t − √ᾱ_t·m) / √(ᾱ_t·s² + 1 − ᾱ_t)` constant.
#[test]
fn decode_follows_the_closed_form_flow() {
    let (m, s2) = (-0.2, 0.3);
    let mut errs = Vec::new();
    for steps in [100, 1000] {
        let schedule = DiffusionSchedule::cosine(steps, 0.008).unwrap();
        let ab = schedule.alpha_bar(steps);
        let den = AnalyticGaussianDenoiser::constant(8, 8, m, s2, schedule).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latent = noise(&mut rng, 8, 8);
        let x0 = decode(&latent, &den).unwrap();
        let scale = s2.sqrt() / (ab * s2 + 1.0 - ab).sqrt();
        let exact = latent.map(|x| m + scale * (x - ab.sqrt() * m));
        errs.push(x0.lincomb(1.0, &exact, -1.0).unwrap().norm() / exact.norm());
    }
    assert!(errs[1] < errs[0] && errs[1] < 1e-2, "{errs:?}");
}

#[test]
fn ddim_steps_are_inverse_to_first_order() {
    let schedule = DiffusionSchedule::cosine(1000, 0.008).unwrap();
    let den = AnalyticGaussianDenoiser::constant(4, 4, 0.0, 0.5, schedule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = noise(&mut rng, 4, 4);
    let there = ddim_step(&x, 500, 1, &den).unwrap();
    let back = ddim_step(&there, 501, -1, &den).unwrap();
    let err = back.lincomb(1.0, &x, -1.0).unwrap().norm() / x.norm();
    assert!(err < 1e-5, "{err}");
    assert!(ddim_step(&x, 500, 0, &den).is_err());
    assert!(ddim_step(&x, 1000, 1, &den).is_err());
    assert_eq!(den.schedule().steps(), 1000);
}
