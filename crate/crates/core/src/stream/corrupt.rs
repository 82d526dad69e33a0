//! Parametric corruption families with five monotone severity levels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Contrast,
    Brightness,
    Fog,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Fog,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

/// A target domain: corruption kind at a severity in `0..=5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "DomainSpecRepr", into = "DomainSpecRepr")]
pub struct DomainSpec {
    kind: CorruptionKind,
    severity: u8,
}

#[derive(Serialize, Deserialize)]
struct DomainSpecRepr {
    kind: CorruptionKind,
    severity: u8,
}

impl TryFrom<DomainSpecRepr> for DomainSpec {
    type Error = Error;

    fn try_from(r: DomainSpecRepr) -> Result<Self> {
        DomainSpec::new(r.kind, r.severity)
    }
}

impl From<DomainSpec> for DomainSpecRepr {
    fn from(d: DomainSpec) -> Self {
        DomainSpecRepr {
            kind: d.kind,
            severity: d.severity,
        }
    }
}

impl DomainSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::invalid(format!(
                "severity {severity} outside [0, {MAX_SEVERITY}]"
            )));
        }
        Ok(DomainSpec { kind, severity })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    /// All eight kinds at one severity, in canonical order.
    pub fn all_at(severity: u8) -> Result<Vec<DomainSpec>> {
        CorruptionKind::ALL
            .into_iter()
            .map(|k| DomainSpec::new(k, severity))
            .collect()
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.severity)
    }
}

/// Parses `kind@severity`.
impl FromStr for DomainSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("domain {s:?} is not kind@severity")))?;
        let sev: u8 = sev
            .parse()
            .map_err(|_| Error::invalid(format!("bad severity in {s:?}")))?;
        DomainSpec::new(kind.parse()?, sev)
    }
}

pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
pub const BLUR_RADIUS: [usize; 5] = [1, 1, 2, 2, 3];
pub const BLUR_PASSES: [usize; 5] = [1, 2, 2, 3, 3];
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const FOG_ALPHA: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];
pub const PIXELATE_BLOCK: [usize; 5] = [2, 2, 4, 4, 8];

/// Applies the corruption; severity 0 returns the input unchanged.
pub fn corrupt(image: &Image, spec: DomainSpec, rng: &mut impl Rng) -> Image {
    if spec.severity == 0 {
        return image.clone();
    }
    let s = usize::from(spec.severity - 1);
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let mut data: Vec<f32> = image.data().to_vec();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_SIGMA[s]).expect("positive sigma");
            for v in &mut data {
                *v += normal.sample(rng) as f32;
            }
        }
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_PHOTONS[s];
            for v in &mut data {
                let rate = f64::from(*v) * lambda;
                *v = if rate > 0.0 {
                    let p = Poisson::new(rate).expect("positive rate");
                    (p.sample(rng) / lambda) as f32
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRACTION[s];
            for v in &mut data {
                if rng.random_bool(frac) {
                    *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            for c in 0..ch {
                let plane = &mut data[c * w * h..(c + 1) * w * h];
                for _ in 0..BLUR_PASSES[s] {
                    box_blur(plane, w, h, BLUR_RADIUS[s]);
                }
            }
        }
        CorruptionKind::Contrast => {
            let k = CONTRAST_FACTOR[s] as f32;
            for c in 0..ch {
                let mean = image.channel_mean(c) as f32;
                for v in &mut data[c * w * h..(c + 1) * w * h] {
                    *v = (*v - mean) * k + mean;
                }
            }
        }
        CorruptionKind::Brightness => {
            let shift = BRIGHTNESS_SHIFT[s] as f32;
            for v in &mut data {
                *v += shift;
            }
        }
        CorruptionKind::Fog => {
            let alpha = FOG_ALPHA[s] as f32;
            let haze = haze_field(w, h, rng);
            for c in 0..ch {
                let plane = &mut data[c * w * h..(c + 1) * w * h];
                for (v, &z) in plane.iter_mut().zip(&haze) {
                    *v = (1.0 - alpha) * *v + alpha * z;
                }
            }
        }
        CorruptionKind::Pixelate => {
            let block = PIXELATE_BLOCK[s];
            for c in 0..ch {
                pixelate(&mut data[c * w * h..(c + 1) * w * h], w, h, block);
            }
        }
    }
    Image::from_clamped(w, h, ch, data)
}

/// Separable box blur of radius `r` with clamp-to-edge borders.
fn box_blur(plane: &mut [f32], w: usize, h: usize, r: usize) {
    let window = (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in 0..=2 * r {
                let xx = (x + d).saturating_sub(r).min(w - 1);
                acc += plane[y * w + xx];
            }
            tmp[y * w + x] = acc / window;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in 0..=2 * r {
                let yy = (y + d).saturating_sub(r).min(h - 1);
                acc += tmp[yy * w + x];
            }
            plane[y * w + x] = acc / window;
        }
    }
}

/// Replaces each `block`×`block` cell with its mean; edge cells may be partial.
pub(crate) fn pixelate(plane: &mut [f32], w: usize, h: usize, block: usize) {
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ys = by..(by + block).min(h);
            let xs = bx..(bx + block).min(w);
            let count = (ys.len() * xs.len()) as f32;
            let mut acc = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    acc += plane[y * w + x];
                }
            }
            let mean = acc / count;
            for y in ys.clone() {
                for x in xs.clone() {
                    plane[y * w + x] = mean;
                }
            }
        }
    }
}

/// Smooth random field in `[0.5, 1]` built from a few low-frequency cosines.
fn haze_field(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f32> {
    const WAVES: usize = 4;
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let fx = rng.random_range(0.5..2.0);
            let fy = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fx, fy, phase)
        })
        .collect();
    let raw: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            waves
                .iter()
                .map(|&(fx, fy, p)| (std::f64::consts::TAU * (fx * x + fy * y) + p).cos())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.into_iter()
        .map(|v| (0.5 + 0.5 * (v - lo) / span) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Image {
        let data = (0..3 * 16 * 16).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in DomainSpec::all_at(0).unwrap() {
            assert_eq!(corrupt(&img, spec, &mut rng), img, "{spec}");
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sev in 1..=MAX_SEVERITY {
            for spec in DomainSpec::all_at(sev).unwrap() {
                let out = corrupt(&img, spec, &mut rng);
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_ne!(out, img, "{spec} left the image untouched");
            }
        }
    }

    #[test]
    fn severity_tables_are_monotone() {
        for s in 0..4 {
            assert!(GAUSSIAN_SIGMA[s + 1] >= GAUSSIAN_SIGMA[s]);
            assert!(SHOT_PHOTONS[s + 1] <= SHOT_PHOTONS[s]);
            assert!(IMPULSE_FRACTION[s + 1] >= IMPULSE_FRACTION[s]);
            assert!(BLUR_RADIUS[s + 1] * BLUR_PASSES[s + 1] >= BLUR_RADIUS[s] * BLUR_PASSES[s]);
            assert!(CONTRAST_FACTOR[s + 1] <= CONTRAST_FACTOR[s]);
            assert!(BRIGHTNESS_SHIFT[s + 1] >= BRIGHTNESS_SHIFT[s]);
            assert!(FOG_ALPHA[s + 1] >= FOG_ALPHA[s]);
            assert!(PIXELATE_BLOCK[s + 1] >= PIXELATE_BLOCK[s]);
        }
    }

    #[test]
    fn pixelate_block_constancy() {
        let img = ramp();
        let mut one = img.plane(0).to_vec();
        pixelate(&mut one, 16, 16, 1);
        assert_eq!(one, img.plane(0));
        let spec = DomainSpec::new(CorruptionKind::Pixelate, 1).unwrap();
        let out = corrupt(&img, spec, &mut ChaCha8Rng::seed_from_u64(0));
        for c in 0..3 {
            for y in (0..16).step_by(2) {
                for x in (0..16).step_by(2) {
                    let v = out.get(c, x, y);
                    assert_eq!(out.get(c, x + 1, y), v);
                    assert_eq!(out.get(c, x, y + 1), v);
                    assert_eq!(out.get(c, x + 1, y + 1), v);
                }
            }
        }
    }

    #[test]
    fn contrast_preserves_channel_mean_of_unclamped_image() {
        let img = Image::new(2, 1, 1, vec![0.4, 0.6]).unwrap();
        let spec = DomainSpec::new(CorruptionKind::Contrast, 5).unwrap();
        let out = corrupt(&img, spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((out.data()[0] - 0.48).abs() < 1e-6);
        assert!((out.data()[1] - 0.52).abs() < 1e-6);
    }

    #[test]
    fn domain_spec_parsing_and_validation() {
        let d: DomainSpec = "fog@3".parse().unwrap();
        assert_eq!(d.kind(), CorruptionKind::Fog);
        assert_eq!(d.severity(), 3);
        assert_eq!(d.to_string(), "fog@3");
        assert!("fog@6".parse::<DomainSpec>().is_err());
        assert!("snow@1".parse::<DomainSpec>().is_err());
        assert!("fog".parse::<DomainSpec>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<DomainSpec>(&json).unwrap(), d);
        assert!(serde_json::from_str::<DomainSpec>(r#"{"kind":"fog","severity":9}"#).is_err());
    }
}
