use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::patches::PATCH_CENTER;
use super::volume::{DomainTag, Mask, Volume};
use super::{normalize_unit, DomainDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 100;

/// Generator parameters of one imaging domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainConfig {
    pub domain: DomainTag,
    /// Gaussian blur of both channels, in pixels.
    pub blur_sigma: f64,
    /// Intensity added to FLAIR inside lesions.
    pub lesion_contrast: f64,
    pub noise_sigma: f64,
    /// Exponent of the power-law intensity remapping.
    pub intensity_gamma: f64,
    /// Inclusive range of lesions per slice.
    pub lesion_count_range: (usize, usize),
    /// Range of lesion semi-axis lengths in pixels.
    pub lesion_radius_range: (f64, f64),
    pub image_side: usize,
    pub seed: u64,
}

impl DomainConfig {
    pub fn source() -> Self {
        DomainConfig {
            domain: DomainTag::Source,
            blur_sigma: 1.2,
            lesion_contrast: 0.35,
            noise_sigma: 0.02,
            intensity_gamma: 1.0,
            lesion_count_range: (1, 6),
            lesion_radius_range: (2.0, 7.0),
            image_side: 128,
            seed: 1,
        }
    }

    pub fn target() -> Self {
        DomainConfig {
            domain: DomainTag::Target,
            blur_sigma: 0.6,
            lesion_contrast: 0.55,
            intensity_gamma: 0.4,
            lesion_radius_range: (1.5, 5.0),
            seed: 2,
            ..DomainConfig::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::param(msg));
        if !(self.blur_sigma >= 0.0) {
            return bad(format!("blur_sigma must be non-negative, got {}", self.blur_sigma));
        }
        if !(self.lesion_contrast > 0.0) {
            return bad(format!("lesion_contrast must be positive, got {}", self.lesion_contrast));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.intensity_gamma > 0.0) {
            return bad(format!("intensity_gamma must be positive, got {}", self.intensity_gamma));
        }
        if self.image_side < 64 {
            return bad(format!("image_side must be at least 64, got {}", self.image_side));
        }
        let (lo, hi) = self.lesion_count_range;
        if lo > hi {
            return bad(format!("lesion_count_range {lo}..{hi} is empty"));
        }
        let (rlo, rhi) = self.lesion_radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("lesion_radius_range {rlo}..{rhi} is invalid"));
        }
        Ok(())
    }
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig::source()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Separable Gaussian blur of an `[H, W]` image with edge clamping.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let src = image.data();
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                let cc = (c as isize + d).clamp(0, w as isize - 1) as usize;
                acc += k * src[r * w + cc] as f64;
            }
            tmp[r * w + c] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                let rr = (r as isize + d).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[rr * w + c] as f64;
            }
            out[r * w + c] = acc as f32;
        }
    }
    Tensor::from_vec(&[h, w], out).expect("same shape")
}

/// Sum of a few random low-frequency plane waves, amplitude about `amp`.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, amp: f64, side: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let freq = rng.random_range(1.5..5.0) * 2.0 * PI / side;
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI), amp / 6f64.sqrt())
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, r: f64, c: f64) -> f64 {
        self.waves.iter().map(|&(fy, fx, ph, a)| a * (fy * r + fx * c + ph).sin()).sum()
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    r: f64,
    c: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(row, col)`; < 1 inside.
    fn level(&self, row: f64, col: f64) -> f64 {
        let (dy, dx) = (row - self.r, col - self.c);
        let (s, co) = self.theta.sin_cos();
        let u = co * dy + s * dx;
        let v = -s * dy + co * dx;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Generates one normalized slice. Deterministic in `(config.seed, index)`.
pub fn generate_volume(config: &DomainConfig, index: u32) -> Result<Volume> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let side = config.image_side;
    let s = side as f64 / 128.0;
    let mid = side as f64 / 2.0;

    let brain = Ellipse {
        r: mid + rng.random_range(-3.0..3.0) * s,
        c: mid + rng.random_range(-3.0..3.0) * s,
        a: rng.random_range(48.0..54.0) * s,
        b: rng.random_range(40.0..46.0) * s,
        theta: rng.random_range(-0.1..0.1),
    };
    let wm = Ellipse { a: brain.a * 0.74, b: brain.b * 0.70, ..brain };
    let wobble: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..2.0 * PI), rng.random_range(0.03..0.08))).collect();
    let ventricles = [-1.0, 1.0].map(|side_sign| Ellipse {
        r: brain.r - 4.0 * s,
        c: brain.c + side_sign * rng.random_range(5.0..7.0) * s,
        a: rng.random_range(10.0..14.0) * s,
        b: rng.random_range(2.5..4.0) * s,
        theta: side_sign * rng.random_range(0.1..0.3),
    });

    let mut brain_mask = Mask::zeros(side, side);
    // 0 background, 1 CSF, 2 grey matter, 3 white matter
    let mut tissue = vec![0u8; side * side];
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64, c as f64);
            if brain.level(y, x) >= 1.0 {
                continue;
            }
            brain_mask.set(r, c, true);
            let angle = (y - brain.r).atan2(x - brain.c);
            let bump: f64 = wobble.iter().enumerate().map(|(k, &(ph, amp))| amp * ((k + 2) as f64 * angle + ph).sin()).sum();
            tissue[r * side + c] = if ventricles.iter().any(|v| v.level(y, x) < 1.0) {
                1
            } else if wm.level(y, x) < (1.0 + bump).powi(2) {
                3
            } else {
                2
            };
        }
    }

    let flair_tex = Texture::new(&mut rng, 0.03, side as f64);
    let t1_tex = Texture::new(&mut rng, 0.03, side as f64);
    let mut flair = vec![0.0f64; side * side];
    let mut t1 = vec![0.0f64; side * side];
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            let (f, t) = match tissue[i] {
                1 => (0.10, 0.15),
                2 => (0.50, 0.45),
                3 => (0.40, 0.75),
                _ => continue,
            };
            flair[i] = f + flair_tex.at(r as f64, c as f64);
            t1[i] = t + t1_tex.at(r as f64, c as f64);
        }
    }

    let mut wmh = Mask::zeros(side, side);
    let (lo, hi) = config.lesion_count_range;
    let count = rng.random_range(lo..=hi);
    let margin = PATCH_CENTER as f64;
    for k in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (rlo, rhi) = config.lesion_radius_range;
            let a = rng.random_range(rlo..=rhi) * s;
            let b = a * rng.random_range(0.6..=1.0);
            let lesion = Ellipse {
                r: rng.random_range(margin..side as f64 - margin),
                c: rng.random_range(margin..side as f64 - margin),
                a,
                b,
                theta: rng.random_range(0.0..PI),
            };
            if fits(&lesion, &tissue, side) {
                placed = Some(lesion);
                break;
            }
        }
        let lesion = placed.ok_or_else(|| {
            Error::Generation(format!(
                "patient {index}: lesion {} did not fit in white matter after {PLACEMENT_ATTEMPTS} attempts",
                k + 1
            ))
        })?;
        let reach = lesion.a.ceil() as usize + 1;
        let (r0, c0) = (lesion.r as usize, lesion.c as usize);
        for r in r0.saturating_sub(reach)..(r0 + reach + 1).min(side) {
            for c in c0.saturating_sub(reach)..(c0 + reach + 1).min(side) {
                if lesion.level(r as f64, c as f64) < 1.0 && wmh.get(r, c) == 0 {
                    wmh.set(r, c, true);
                    flair[r * side + c] += config.lesion_contrast;
                }
            }
        }
    }

    let finish = |image: Vec<f64>, rng: &mut ChaCha8Rng| -> Result<Tensor<f32>> {
        let t = Tensor::from_vec(&[side, side], image.into_iter().map(|v| v as f32).collect())?;
        let blurred = gaussian_blur(&t, config.blur_sigma);
        let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let data = blurred
            .data()
            .iter()
            .map(|&v| {
                let g = (v.max(0.0) as f64).powf(config.intensity_gamma);
                let n = if config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                (g + n) as f32
            })
            .collect();
        Tensor::from_vec(&[side, side], data)
    };
    let flair = finish(flair, &mut rng)?;
    let t1 = finish(t1, &mut rng)?;
    let raw = Volume::new(flair, t1, wmh, brain_mask, index, config.domain)?;
    normalize_unit(&raw)
}

/// Whether every pixel of `lesion` lies in white matter, away from CSF and
/// cortex by at least one pixel.
fn fits(lesion: &Ellipse, tissue: &[u8], side: usize) -> bool {
    let reach = lesion.a.ceil() as isize + 2;
    let (r0, c0) = (lesion.r as isize, lesion.c as isize);
    for r in r0 - reach..=r0 + reach {
        for c in c0 - reach..=c0 + reach {
            let grown = Ellipse { a: lesion.a + 1.0, b: lesion.b + 1.0, ..*lesion };
            if grown.level(r as f64, c as f64) >= 1.0 {
                continue;
            }
            if r < 0 || c < 0 || r >= side as isize || c >= side as isize {
                return false;
            }
            if tissue[r as usize * side + c as usize] != 3 {
                return false;
            }
        }
    }
    true
}

/// Generates a dataset with patient ids `0..total`, assigned to train, then
/// validation, then test in order.
pub fn generate_domain(config: &DomainConfig, sizes: SplitSizes) -> Result<DomainDataset> {
    config.validate()?;
    if sizes.total() == 0 {
        return Err(Error::param("a domain needs at least one patient"));
    }
    let mut volumes = (0..sizes.total() as u32)
        .map(|i| generate_volume(config, i))
        .collect::<Result<Vec<_>>>()?;
    let test = volumes.split_off(sizes.train + sizes.val);
    let val = volumes.split_off(sizes.train);
    DomainDataset::new(config.domain, volumes, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_contrast(vols: &[Volume]) -> f64 {
        let (mut les, mut nles, mut norm, mut nnorm) = (0.0, 0usize, 0.0, 0usize);
        for v in vols {
            for i in 0..v.flair().len() {
                let (r, c) = (i / v.width(), i % v.width());
                let f = v.flair().data()[i] as f64;
                if v.wmh_mask().get(r, c) == 1 {
                    les += f;
                    nles += 1;
                } else if v.brain_mask().get(r, c) == 1 {
                    norm += f;
                    nnorm += 1;
                }
            }
        }
        les / nles as f64 - norm / nnorm as f64
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = DomainConfig { noise_sigma: 0.0, ..DomainConfig::source() };
        assert_eq!(generate_volume(&cfg, 3).unwrap(), generate_volume(&cfg, 3).unwrap());
        let noisy = DomainConfig::target();
        assert_eq!(generate_volume(&noisy, 5).unwrap(), generate_volume(&noisy, 5).unwrap());
        assert_ne!(generate_volume(&noisy, 5).unwrap(), generate_volume(&noisy, 6).unwrap());
    }

    #[test]
    fn zero_lesions_give_an_empty_mask() {
        let cfg = DomainConfig { lesion_count_range: (0, 0), ..DomainConfig::source() };
        for i in 0..3 {
            assert_eq!(generate_volume(&cfg, i).unwrap().wmh_mask().count(), 0);
        }
    }

    #[test]
    fn volumes_are_normalized_with_lesions_inside_brain() {
        for cfg in [DomainConfig::source(), DomainConfig::target()] {
            for i in 0..4 {
                let v = generate_volume(&cfg, i).unwrap();
                assert_eq!(v.domain(), cfg.domain);
                assert!(v.wmh_mask().is_subset_of(v.brain_mask()));
                assert!(v.wmh_mask().count() > 0);
                let inside: Vec<f32> = v
                    .flair()
                    .data()
                    .iter()
                    .zip(v.brain_mask().data())
                    .filter(|(_, &m)| m == 1)
                    .map(|(&f, _)| f)
                    .collect();
                assert_eq!(inside.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
                assert_eq!(inside.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
                let (r0, r1, c0, c1) = v.brain_mask().bounding_box().unwrap();
                assert!(r0 > 0 && c0 > 0 && r1 < 128 && c1 < 128);
            }
        }
    }

    #[test]
    fn target_lesions_have_higher_contrast() {
        let src: Vec<Volume> = (0..6).map(|i| generate_volume(&DomainConfig::source(), i).unwrap()).collect();
        let tgt: Vec<Volume> = (0..6).map(|i| generate_volume(&DomainConfig::target(), i).unwrap()).collect();
        let (cs, ct) = (mean_contrast(&src), mean_contrast(&tgt));
        assert!(ct > cs, "source contrast {cs}, target {ct}");
    }

    #[test]
    fn impossible_lesions_are_generation_errors() {
        let cfg = DomainConfig { lesion_radius_range: (40.0, 40.0), ..DomainConfig::source() };
        assert!(matches!(generate_volume(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = Tensor::full(&[9, 9], 0.3f32);
        assert!(gaussian_blur(&flat, 1.5).data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let mut spike = Tensor::zeros(&[21, 21]);
        spike.data_mut()[10 * 21 + 10] = 1.0f32;
        let b = gaussian_blur(&spike, 1.0);
        let mass: f32 = b.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-5);
        assert_eq!(gaussian_blur(&spike, 0.0), spike);
    }

    #[test]
    fn domain_splits_follow_sizes() {
        let sizes = SplitSizes { train: 3, val: 1, test: 2 };
        let d = generate_domain(&DomainConfig::target(), sizes).unwrap();
        assert_eq!(d.sizes(), sizes);
        let ids: Vec<u32> = d.train().iter().chain(d.val()).chain(d.test()).map(|v| v.patient_id()).collect();
        assert_eq!(ids, [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            DomainConfig { blur_sigma: -1.0, ..Default::default() },
            DomainConfig { lesion_contrast: 0.0, ..Default::default() },
            DomainConfig { image_side: 32, ..Default::default() },
            DomainConfig { lesion_count_range: (3, 1), ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
