//! Synthetic "healthy phantom plus additive lesion" images.
//!
//! A normal image is a soft-edged centred ellipse drawn from `k_factors`
//! uniform factors in `[0, 1)`:
//!
//! | factor | controls                                  |
//! |--------|-------------------------------------------|
//! | 0      | semi-axis `a` in [14, 24] px              |
//! | 1      | semi-axis `b` in [10, 20] px              |
//! | 2      | rotation in [0, π)                        |
//! | 3      | interior intensity in [0.30, 0.50]        |
//! | 4      | direction of a linear interior gradient   |
//! | j ≥ 5  | amplitude of radial harmonic of order j−3 |
//!
//! Factors the family does not use sit at 0.5. Abnormal images add bright
//! raised-cosine discs on top of a normal image.

mod dataset;
mod pgm;

pub use dataset::{build_dataset, load_dataset, read_manifest, Dataset, DatasetManifest, ManifestRecord, Splits, MANIFEST_NAME};
pub use pgm::{dequantize, parse_pgm, quantize, read_pgm, write_pgm, write_pgm_bytes};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 64;
/// Lesion ground truth: pixels where the added intensity exceeds this.
pub const MASK_THRESHOLD: f64 = 0.05;
/// Smallest mask an abnormal record may carry (a radius-3 disc).
pub const MIN_MASK_PIXELS: usize = 28;

const BACKGROUND: f64 = 0.1;
const GRADIENT_AMPLITUDE: f64 = 0.1;
const HARMONIC_AMPLITUDE: f64 = 0.15;
const EDGE_SHARPNESS: f64 = 20.0;
const LESION_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionConfig {
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        LesionConfig {
            count_min: 1,
            count_max: 2,
            radius_min: 3.0,
            radius_max: 7.0,
            delta_min: 0.2,
            delta_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub k_factors: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub lesion: LesionConfig,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            k_factors: 4,
            image_size: IMAGE_SIDE,
            noise_sigma: 0.01,
            lesion: LesionConfig::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_factors == 0 {
            return bad("k_factors must be at least 1".into());
        }
        if self.image_size != IMAGE_SIDE {
            return bad(format!("image_size must be {IMAGE_SIDE}, got {}", self.image_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        let l = &self.lesion;
        if l.count_min == 0 || l.count_min > l.count_max {
            return bad(format!("lesion count range {}..={} is empty or zero", l.count_min, l.count_max));
        }
        if !(l.radius_min >= 3.0 && l.radius_min <= l.radius_max && l.radius_max <= 12.0) {
            return bad(format!("lesion radius range [{}, {}] must lie in [3, 12]", l.radius_min, l.radius_max));
        }
        if !(l.delta_min > MASK_THRESHOLD && l.delta_min <= l.delta_max && l.delta_max <= 1.0) {
            return bad(format!(
                "lesion delta range [{}, {}] must lie in ({MASK_THRESHOLD}, 1]",
                l.delta_min, l.delta_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Row-major `64 × 64` pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: Label,
    /// Row-major 0/1 lesion mask, all zero for normal records.
    pub mask: Vec<u8>,
    pub factors: Vec<f64>,
    pub seed: u64,
}

impl SampleRecord {
    pub fn image_tensor(&self) -> Result<Tensor> {
        let side = (self.image.len() as f64).sqrt() as usize;
        Tensor::new(&[1, 1, side, side], self.image.clone())
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn check(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Dataset {
                record: self.id.clone(),
                detail,
            })
        };
        let n = IMAGE_SIDE * IMAGE_SIDE;
        if self.image.len() != n || self.mask.len() != n {
            return fail(format!("expected {n} pixels"));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("pixel outside [0, 1]".into());
        }
        match self.label {
            Label::Normal if self.mask_area() > 0 => fail("normal record with non-empty mask".into()),
            Label::Abnormal if self.mask_area() < MIN_MASK_PIXELS => fail(format!(
                "abnormal record with {} mask pixels, need at least {MIN_MASK_PIXELS}",
                self.mask_area()
            )),
            _ => Ok(()),
        }
    }
}

/// The factor vector a seed produces; unused factor slots are not stored.
pub fn draw_factors(seed: u64, cfg: &GeneratorConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.k_factors).map(|_| rng.random::<f64>()).collect()
}

struct Phantom {
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    intensity: f64,
    grad: (f64, f64),
    harmonics: Vec<(f64, f64)>,
}

impl Phantom {
    fn new(factors: &[f64]) -> Self {
        let f = |i: usize| factors.get(i).copied().unwrap_or(0.5);
        let theta = PI * f(2);
        let phi = 2.0 * PI * f(4);
        let harmonics = (5..factors.len().max(5))
            .map(|j| ((j - 3) as f64, HARMONIC_AMPLITUDE * (2.0 * f(j) - 1.0)))
            .collect();
        Phantom {
            a: 14.0 + 10.0 * f(0),
            b: 10.0 + 10.0 * f(1),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            intensity: 0.3 + 0.2 * f(3),
            grad: (phi.cos(), phi.sin()),
            harmonics,
        }
    }

    /// Soft membership in `(0, 1)` of the pixel centre at `(x, y)`.
    fn support(&self, x: f64, y: f64) -> f64 {
        let c = (IMAGE_SIDE as f64 - 1.0) / 2.0;
        let (dx, dy) = (x - c, y - c);
        let u = self.cos_t * dx + self.sin_t * dy;
        let v = -self.sin_t * dx + self.cos_t * dy;
        let mut rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        if !self.harmonics.is_empty() {
            let ang = v.atan2(u);
            let scale: f64 = 1.0 + self.harmonics.iter().map(|(m, amp)| amp * (m * ang).cos()).sum::<f64>();
            rho /= scale;
        }
        1.0 / (1.0 + (EDGE_SHARPNESS * (rho - 1.0)).exp())
    }

    fn pixel(&self, x: f64, y: f64) -> f64 {
        let c = (IMAGE_SIDE as f64 - 1.0) / 2.0;
        let along = ((x - c) * self.grad.0 + (y - c) * self.grad.1) / self.a;
        let inside = self.intensity + GRADIENT_AMPLITUDE * along;
        BACKGROUND + self.support(x, y) * (inside - BACKGROUND)
    }
}

/// A normal record: phantom from `k_factors` draws of `seed`, plus pixel noise.
pub fn generate_normal(seed: u64, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<f64> = (0..cfg.k_factors).map(|_| rng.random::<f64>()).collect();
    let phantom = Phantom::new(&factors);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = IMAGE_SIDE;
    let mut image = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let clean = phantom.pixel(x as f64, y as f64);
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image.push((clean + eps).clamp(0.0, 1.0));
        }
    }
    Ok(SampleRecord {
        id: format!("normal-{seed}"),
        image,
        label: Label::Normal,
        mask: vec![0; n * n],
        factors,
        seed,
    })
}

/// Raised-cosine disc: flat `delta` out to `radius − 1`, rolling off to zero at `radius + 1`.
pub fn lesion_profile(r: f64, radius: f64, delta: f64) -> f64 {
    let inner = radius - 1.0;
    if r <= inner {
        delta
    } else if r < radius + 1.0 {
        delta * 0.5 * (1.0 + (PI * (r - inner) / 2.0).cos())
    } else {
        0.0
    }
}

/// Added intensity field of an abnormal record, before clamping.
pub fn lesion_field(seed: u64, record: &SampleRecord, cfg: &GeneratorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let l = &cfg.lesion;
    let phantom = Phantom::new(&record.factors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let count = rng.random_range(l.count_min..=l.count_max);
    let n = IMAGE_SIDE;
    let mut field = vec![0.0; n * n];
    for _ in 0..count {
        let radius = rng.random_range(l.radius_min..=l.radius_max);
        let delta = rng.random_range(l.delta_min..=l.delta_max);
        let lo = radius + 2.0;
        let hi = n as f64 - 1.0 - lo;
        let mut centre = None;
        for _ in 0..LESION_RETRIES {
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            if phantom.support(cx, cy) > 0.5 {
                centre = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = centre.ok_or_else(|| Error::Dataset {
            record: record.id.clone(),
            detail: format!("no lesion position inside the phantom after {LESION_RETRIES} tries"),
        })?;
        for y in 0..n {
            for x in 0..n {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                field[y * n + x] += lesion_profile(r, radius, delta);
            }
        }
    }
    Ok(field)
}

/// Adds 1–2 bright discs to a normal record.
pub fn inject_lesion(record: &SampleRecord, seed: u64, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    if record.label != Label::Normal {
        return Err(Error::Contract(format!("{} is already abnormal", record.id)));
    }
    let field = lesion_field(seed, record, cfg)?;
    let image = record
        .image
        .iter()
        .zip(&field)
        .map(|(p, d)| (p + d).clamp(0.0, 1.0))
        .collect();
    let mask = field.iter().map(|&d| u8::from(d > MASK_THRESHOLD)).collect();
    Ok(SampleRecord {
        id: format!("abnormal-{seed}"),
        image,
        label: Label::Abnormal,
        mask,
        factors: record.factors.clone(),
        seed,
    })
}

/// Normal record for `seed`, with a lesion added when `label` is abnormal.
pub fn generate_record(seed: u64, label: Label, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    let normal = generate_normal(seed, cfg)?;
    match label {
        Label::Normal => Ok(normal),
        Label::Abnormal => inject_lesion(&normal, seed, cfg),
    }
}
