use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};
use crate::metrics::{Rect, RoiSpec};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_RIM: u8 = 1;
pub const LABEL_TISSUE: u8 = 2;
pub const LABEL_CAVITY: u8 = 3;

const RAYLEIGH_MEAN: f64 = 1.2533141373155001; // √(π/2)
const RAYLEIGH_SD: f64 = 0.6551363775620336; // √(2 − π/2)

/// Contrast `σ/μ` of a fully developed speckle envelope, `√(4/π − 1)`.
pub const FULLY_DEVELOPED_SPECKLE: f64 = RAYLEIGH_SD / RAYLEIGH_MEAN;

/// Ultrasound-like rendering: bright rim, dark cavities, multiplicative
/// speckle and an acoustic shadow wedge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainAStyle {
    /// Intensities in `[0, 1]` for background, rim, tissue, cavity.
    pub levels: [f64; 4],
    /// Standard deviation of the multiplicative speckle factor, which has a
    /// Rayleigh shape and unit mean. [`FULLY_DEVELOPED_SPECKLE`] makes the
    /// factor exactly Rayleigh.
    pub speckle: f64,
    /// Fraction of intensity removed inside the shadow.
    pub shadow_strength: f64,
    /// Half opening angle of the shadow wedge, degrees.
    pub shadow_half_angle_deg: [f64; 2],
    /// Tilt of the wedge away from straight down, degrees.
    pub shadow_tilt_deg: f64,
}

impl Default for DomainAStyle {
    fn default() -> Self {
        DomainAStyle {
            levels: [0.02, 0.9, 0.45, 0.08],
            speckle: FULLY_DEVELOPED_SPECKLE,
            shadow_strength: 0.55,
            shadow_half_angle_deg: [8.0, 14.0],
            shadow_tilt_deg: 25.0,
        }
    }
}

/// MRI-like rendering: smooth, with the structure contrast inverted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainBStyle {
    pub levels: [f64; 4],
    /// Gaussian blur width in pixels; zero disables smoothing.
    pub smoothing: f64,
}

impl Default for DomainBStyle {
    fn default() -> Self {
        DomainBStyle {
            levels: [0.0, 0.25, 0.5, 0.92],
            smoothing: 0.6,
        }
    }
}

/// Geometry ranges are fractions of the grid size unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    pub head_semi_major: [f64; 2],
    pub head_semi_minor: [f64; 2],
    pub center_jitter: f64,
    pub max_rotation_deg: f64,
    pub rim_thickness: f64,
    /// Cavity distance from the head center along its long axis, as a
    /// fraction of the head's semi-major axis.
    pub cavity_offset: [f64; 2],
    /// Cavity semi-axes as fractions of the head's semi-major axis.
    pub cavity_semi_major: [f64; 2],
    pub cavity_semi_minor: [f64; 2],
    /// Side of the square CNR regions, pixels.
    pub roi_size: usize,
    pub domain_a: DomainAStyle,
    pub domain_b: DomainBStyle,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 32,
            head_semi_major: [0.36, 0.44],
            head_semi_minor: [0.28, 0.35],
            center_jitter: 0.05,
            max_rotation_deg: 20.0,
            rim_thickness: 0.07,
            cavity_offset: [0.32, 0.42],
            cavity_semi_major: [0.22, 0.28],
            cavity_semi_minor: [0.13, 0.17],
            roi_size: 2,
            domain_a: DomainAStyle::default(),
            domain_b: DomainBStyle::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::Config(format!(
            "{name} range {r:?} must be ordered and within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> PhantomSpec {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "phantom size must be at least 8, got {}",
                self.size
            )));
        }
        check_range("head_semi_major", self.head_semi_major, 0.05, 0.5)?;
        check_range("head_semi_minor", self.head_semi_minor, 0.05, 0.5)?;
        if self.head_semi_major[1] + self.center_jitter > 0.5 || self.head_semi_minor[1] + self.center_jitter > 0.5 {
            return Err(Error::Config("head ellipse plus jitter does not fit the grid".into()));
        }
        check_range("cavity_offset", self.cavity_offset, 0.0, 1.0)?;
        check_range("cavity_semi_major", self.cavity_semi_major, 0.0, 1.0)?;
        check_range("cavity_semi_minor", self.cavity_semi_minor, 0.0, 1.0)?;
        if self.cavity_offset[1] + self.cavity_semi_major[1] > 0.85 {
            return Err(Error::Config("cavities extend past the head interior".into()));
        }
        if !(self.rim_thickness > 0.0 && self.rim_thickness < 0.2) {
            return Err(Error::Config(format!(
                "rim_thickness {} out of (0, 0.2)",
                self.rim_thickness
            )));
        }
        if self.roi_size == 0 {
            return Err(Error::Config("roi_size must be positive".into()));
        }
        let a = &self.domain_a;
        if !(a.speckle >= 0.0 && (0.0..=1.0).contains(&a.shadow_strength)) {
            return Err(Error::Config(
                "speckle must be >= 0 and shadow_strength in [0, 1]".into(),
            ));
        }
        check_range("shadow_half_angle_deg", a.shadow_half_angle_deg, 0.0, 90.0)?;
        if self.domain_b.smoothing < 0.0 {
            return Err(Error::Config("smoothing must be >= 0".into()));
        }
        for l in a.levels.iter().chain(&self.domain_b.levels) {
            if !(0.0..=1.0).contains(l) {
                return Err(Error::Config(format!("intensity level {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Counter-clockwise on screen, degrees.
    pub angle_deg: f64,
}

impl Ellipse {
    /// `(x/a)² + (y/b)²` in the ellipse frame; `≤ 1` inside.
    pub fn level(&self, row: f64, col: f64) -> f64 {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (col - self.center_col, self.center_row - row);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        self.level(row, col) <= 1.0
    }

    fn shrunk(&self, by: f64) -> Ellipse {
        Ellipse {
            semi_major: self.semi_major - by,
            semi_minor: self.semi_minor - by,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub size: usize,
    pub head: Ellipse,
    pub cavities: Vec<Ellipse>,
    /// Row-major labels (`LABEL_*`).
    pub labels: Vec<u8>,
    /// Row-major shadow wedge membership.
    pub shadow: Vec<bool>,
    /// One cavity-versus-tissue region pair per cavity.
    pub rois: Vec<RoiSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    /// Domain A, in `[-1, 1]`.
    pub domain_a: ImageGrid,
    /// Domain B, in `[-1, 1]`.
    pub domain_b: ImageGrid,
    /// Domain A without speckle or shadow, in `[-1, 1]`.
    pub clean_a: ImageGrid,
    pub geometry: PhantomGeometry,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn render(labels: &[u8], levels: &[f64; 4], n: usize) -> ImageGrid {
    let data = labels.iter().map(|&l| levels[l as usize]).collect();
    ImageGrid::new(n, n, data, IntensityRange::UNIT).expect("labels cover the grid")
}

fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let pass = |src: &ImageGrid, horizontal: bool| {
        ImageGrid::from_fn(src.height(), src.width(), src.range(), |r, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let d = i as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, c as isize + d)
                    } else {
                        (r as isize + d, c as isize)
                    };
                    k * src.get_clamped(rr, cc)
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// First `k × k` window (scan order) minimizing distance to `target` among
/// windows whose pixels all satisfy `ok`.
fn place_rect(n: usize, k: usize, target: (f64, f64), ok: impl Fn(usize, usize) -> bool) -> Option<Rect> {
    let mut best: Option<(f64, Rect)> = None;
    for r in 0..=n.saturating_sub(k) {
        for c in 0..=n.saturating_sub(k) {
            if !(r..r + k).all(|rr| (c..c + k).all(|cc| ok(rr, cc))) {
                continue;
            }
            let mid = (r as f64 + (k as f64 - 1.0) / 2.0, c as f64 + (k as f64 - 1.0) / 2.0);
            let d = (mid.0 - target.0).powi(2) + (mid.1 - target.1).powi(2);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, Rect::new(r, c, k, k)));
            }
        }
    }
    best.map(|(_, rect)| rect)
}

/// Renders one geometry in both domains.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let n = spec.size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = (nf - 1.0) / 2.0;
    let jitter = spec.center_jitter * nf;
    let head = Ellipse {
        center_row: mid + rng.random_range(-1.0..=1.0) * jitter,
        center_col: mid + rng.random_range(-1.0..=1.0) * jitter,
        semi_major: uniform(&mut rng, spec.head_semi_major) * nf,
        semi_minor: uniform(&mut rng, spec.head_semi_minor) * nf,
        angle_deg: rng.random_range(-1.0..=1.0) * spec.max_rotation_deg,
    };
    let rim = spec.rim_thickness * nf;
    let inner = head.shrunk(rim);
    let offset = uniform(&mut rng, spec.cavity_offset) * head.semi_major;
    let (ca, cb) = (
        uniform(&mut rng, spec.cavity_semi_major) * head.semi_major,
        uniform(&mut rng, spec.cavity_semi_minor) * head.semi_major,
    );
    let (s, c) = head.angle_deg.to_radians().sin_cos();
    let cavities: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            center_row: head.center_row - side * offset * s,
            center_col: head.center_col + side * offset * c,
            semi_major: ca,
            semi_minor: cb,
            angle_deg: head.angle_deg,
        })
        .collect();

    let mut labels = vec![LABEL_BACKGROUND; n * n];
    for r in 0..n {
        for col in 0..n {
            let (rf, cf) = (r as f64, col as f64);
            labels[r * n + col] = if !head.contains(rf, cf) {
                LABEL_BACKGROUND
            } else if !inner.contains(rf, cf) {
                LABEL_RIM
            } else if cavities.iter().any(|e| e.contains(rf, cf)) {
                LABEL_CAVITY
            } else {
                LABEL_TISSUE
            };
        }
    }

    // Wedge from a probe above the head, pointing down with a random tilt.
    let style = &spec.domain_a;
    let half = uniform(&mut rng, style.shadow_half_angle_deg).to_radians();
    let tilt = rng.random_range(-1.0..=1.0) * style.shadow_tilt_deg.to_radians();
    let apex = (head.center_row - 1.5 * head.semi_major, head.center_col);
    let shadow: Vec<bool> = (0..n * n)
        .map(|i| {
            let (r, col) = ((i / n) as f64, (i % n) as f64);
            let (dy, dx) = (r - apex.0, col - apex.1);
            let ang = dx.atan2(dy);
            labels[i] != LABEL_BACKGROUND && (ang - tilt).abs() <= half
        })
        .collect();

    let clean = render(&labels, &style.levels, n);
    let mut a = clean.clone();
    for (i, v) in a.data_mut().iter_mut().enumerate() {
        if shadow[i] {
            *v *= 1.0 - style.shadow_strength;
        }
        let u: f64 = rng.random();
        let z = ((-2.0 * (1.0 - u).ln()).sqrt() - RAYLEIGH_MEAN) / RAYLEIGH_SD;
        *v = (*v * (1.0 + style.speckle * z)).clamp(0.0, 1.0);
    }
    let b = gaussian_blur(&render(&labels, &spec.domain_b.levels, n), spec.domain_b.smoothing);

    let k = spec.roi_size;
    let rois = cavities
        .iter()
        .filter_map(|cav| {
            let roi = place_rect(n, k, (cav.center_row, cav.center_col), |r, c| {
                labels[r * n + c] == LABEL_CAVITY && cav.contains(r as f64, c as f64)
            })?;
            // tissue region at least one pixel clear of any cavity
            let clear = |r: usize, c: usize| {
                let (lo_r, lo_c) = (r.saturating_sub(1), c.saturating_sub(1));
                (lo_r..(r + 2).min(n)).all(|rr| (lo_c..(c + 2).min(n)).all(|cc| labels[rr * n + cc] != LABEL_CAVITY))
            };
            let background = place_rect(n, k, (cav.center_row, cav.center_col), |r, c| {
                labels[r * n + c] == LABEL_TISSUE && clear(r, c)
            })?;
            Some(RoiSpec { roi, background })
        })
        .collect();

    let signed = |g: ImageGrid| g.renormalized(IntensityRange::SIGNED_UNIT);
    Ok(PhantomPair {
        domain_a: signed(a),
        domain_b: signed(b),
        clean_a: signed(clean),
        geometry: PhantomGeometry {
            size: n,
            head,
            cavities,
            labels,
            shadow,
            rois,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_limit_is_the_clean_rendering() {
        let mut spec = PhantomSpec::default().with_seed(3);
        spec.domain_a.speckle = 0.0;
        spec.domain_a.shadow_strength = 0.0;
        let p = generate_phantom_pair(&spec).unwrap();
        assert_eq!(p.domain_a, p.clean_a);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = PhantomSpec::default().with_seed(11);
        assert_eq!(
            generate_phantom_pair(&spec).unwrap(),
            generate_phantom_pair(&spec).unwrap()
        );
        assert_ne!(
            generate_phantom_pair(&spec).unwrap().domain_a,
            generate_phantom_pair(&spec.with_seed(12)).unwrap().domain_a
        );
    }

    #[test]
    fn geometry_is_complete() {
        for seed in 0..50 {
            let p = generate_phantom_pair(&PhantomSpec::default().with_seed(seed)).unwrap();
            let g = &p.geometry;
            assert_eq!(g.cavities.len(), 2);
            assert_eq!(g.rois.len(), 2, "seed {seed}");
            for roi in &g.rois {
                roi.validate(32, 32).unwrap();
            }
            assert!(g.shadow.iter().any(|&s| s), "seed {seed}");
            assert!(g.labels.contains(&LABEL_CAVITY));
        }
    }

    #[test]
    fn cavity_contrast_is_inverted_between_domains() {
        let p = generate_phantom_pair(&PhantomSpec::default().with_seed(5)).unwrap();
        let roi = p.geometry.rois[0];
        let (ma, _) = roi.roi.moments(&p.clean_a);
        let (ta, _) = roi.background.moments(&p.clean_a);
        let (mb, _) = roi.roi.moments(&p.domain_b);
        let (tb, _) = roi.background.moments(&p.domain_b);
        assert!(ma < ta && mb > tb);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            PhantomSpec {
                size: 4,
                ..PhantomSpec::default()
            },
            PhantomSpec {
                head_semi_major: [0.5, 0.4],
                ..PhantomSpec::default()
            },
            PhantomSpec {
                roi_size: 0,
                ..PhantomSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(generate_phantom_pair(&spec), Err(Error::Config(_))));
        }
    }
}
