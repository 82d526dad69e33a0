//! Procedural glyph classes rendered with 4×4 supersampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub const NUM_GLYPHS: usize = 10;
pub const GLYPH_IMAGE_SIZE: usize = 32;
pub const BACKGROUND: f32 = 0.9;
pub const FOREGROUND: f32 = 0.1;

/// Glyph radius in pixels at unit scale.
const RADIUS: f64 = 10.0;
const SUPERSAMPLE: usize = 4;

pub const GLYPH_NAMES: [&str; NUM_GLYPHS] = [
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "star",
    "horizontal_bar",
    "vertical_bar",
    "diamond",
    "dot_grid",
];

/// Placement perturbation of a glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    pub const MAX_SHIFT: f64 = 4.0;
    pub const SCALE_RANGE: (f64, f64) = (0.7, 1.2);
    pub const MAX_ROTATION_DEG: f64 = 20.0;

    pub fn validate(&self) -> Result<()> {
        let ok = self.dx.abs() <= Self::MAX_SHIFT
            && self.dy.abs() <= Self::MAX_SHIFT
            && (Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1).contains(&self.scale)
            && self.rotation_deg.abs() <= Self::MAX_ROTATION_DEG;
        if !ok {
            return Err(Error::invalid(format!("jitter {self:?} out of range")));
        }
        Ok(())
    }

    /// Uniform draw over the full jitter range.
    pub fn sample(rng: &mut impl Rng) -> Jitter {
        Jitter {
            dx: rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            dy: rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            scale: rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
            rotation_deg: rng.random_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG),
        }
    }
}

/// Renders class `class` with the default stroke width.
pub fn render_glyph(class: usize, jitter: &Jitter) -> Result<Image> {
    jitter.validate()?;
    render_glyph_raw(class, jitter, 1.0)
}

/// Renders with a stroke-width multiplier applied to the thin parts of a
/// glyph (bars, ring, cross arms, dots). Rotation is not range-checked
/// here so symmetric rotations can be probed.
pub fn render_glyph_raw(class: usize, jitter: &Jitter, stroke: f64) -> Result<Image> {
    if class >= NUM_GLYPHS {
        return Err(Error::invalid(format!(
            "glyph class {class} outside [0, {NUM_GLYPHS})"
        )));
    }
    let n = GLYPH_IMAGE_SIZE;
    let center = n as f64 / 2.0;
    let (sin, cos) = (-jitter.rotation_deg.to_radians()).sin_cos();
    let unit = RADIUS * jitter.scale;
    let mut plane = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - center - jitter.dx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - center - jitter.dy;
                    let u = (cos * px - sin * py) / unit;
                    let v = (sin * px + cos * py) / unit;
                    if inside(class, u, v, stroke) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            plane[y * n + x] = BACKGROUND - coverage * (BACKGROUND - FOREGROUND);
        }
    }
    let mut data = Vec::with_capacity(3 * n * n);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Image::new(n, n, 3, data)
}

/// Membership test in glyph coordinates (unit radius, y pointing down).
fn inside(class: usize, u: f64, v: f64, stroke: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 0.8,
        1 => u.abs().max(v.abs()) <= 0.7,
        2 => (-0.8..=0.6).contains(&v) && u.abs() <= 0.85 * (v + 0.8) / 1.4,
        3 => {
            let w = 0.2 * stroke;
            (u.abs() <= w && v.abs() <= 0.85) || (v.abs() <= w && u.abs() <= 0.85)
        }
        4 => (r - 0.65).abs() <= 0.15 * stroke,
        5 => in_star(u, v),
        6 => u.abs() <= 0.9 && v.abs() <= 0.22 * stroke,
        7 => v.abs() <= 0.9 && u.abs() <= 0.22 * stroke,
        8 => u.abs() + v.abs() <= 0.9,
        9 => {
            let rad = 0.17 * stroke;
            [-0.6, 0.0, 0.6].iter().any(|&cy| {
                [-0.6, 0.0, 0.6]
                    .iter()
                    .any(|&cx| (u - cx).powi(2) + (v - cy).powi(2) <= rad * rad)
            })
        }
        _ => unreachable!("class validated by caller"),
    }
}

fn in_star(u: f64, v: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let radius = if k % 2 == 0 { 0.95 } else { 0.4 };
            let a = (-90.0 + 36.0 * k as f64).to_radians();
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_class_renders_distinct_ink() {
        let imgs: Vec<Image> = (0..NUM_GLYPHS)
            .map(|c| render_glyph(c, &Jitter::NONE).unwrap())
            .collect();
        for (c, img) in imgs.iter().enumerate() {
            let ink = img.data().iter().filter(|&&v| v < 0.5).count();
            assert!(ink > 30, "class {c} has too little ink ({ink})");
            for other in &imgs[..c] {
                assert_ne!(img, other);
            }
        }
    }

    #[test]
    fn determinism_and_validation() {
        let j = Jitter::sample(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(render_glyph(3, &j).unwrap(), render_glyph(3, &j).unwrap());
        assert!(render_glyph(10, &Jitter::NONE).is_err());
        let bad = Jitter {
            scale: 2.0,
            ..Jitter::NONE
        };
        assert!(render_glyph(0, &bad).is_err());
    }

    #[test]
    fn ring_is_symmetric_under_half_turn() {
        let a = render_glyph_raw(4, &Jitter::NONE, 1.0).unwrap();
        let half = Jitter {
            rotation_deg: 180.0,
            ..Jitter::NONE
        };
        let b = render_glyph_raw(4, &half, 1.0).unwrap();
        let max = a.max_abs_diff(&b);
        assert!(max <= 0.8 / 16.0 + 1e-6, "raster difference {max}");
    }

    #[test]
    fn background_is_uniform_light_gray() {
        let img = render_glyph(0, &Jitter::NONE).unwrap();
        assert_eq!(img.get(0, 0, 0), BACKGROUND);
        assert_eq!(img.get(2, 31, 31), BACKGROUND);
    }
}
