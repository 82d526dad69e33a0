//! Compact labelled exemplar store sampled alongside each target batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::stream::{render_glyph_raw, Jitter, NUM_GLYPHS};

/// Scale and stroke ranges for non-canonical exemplar variants.
const VARIANT_SCALE: (f64, f64) = (0.92, 1.08);
const VARIANT_STROKE: (f64, f64) = (0.85, 1.15);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform over entries, with replacement.
    #[default]
    Uniform,
    /// Class drawn uniformly first, then an exemplar of that class.
    Stratified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<(Image, usize)>,
    classes: usize,
    per_class: usize,
}

impl KnowledgeBase {
    /// Checks the class-balance invariant. Entries are stored class-major.
    pub fn new(mut entries: Vec<(Image, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("no exemplars found"));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (_, y) in &entries {
            *counts.entry(*y).or_default() += 1;
        }
        let classes = counts.len();
        if counts.keys().copied().ne(0..classes) {
            return Err(Error::invalid("class ids are not contiguous from 0"));
        }
        let per_class = counts[&0];
        if counts.values().any(|&c| c != per_class) {
            return Err(Error::invalid("ragged class counts"));
        }
        let first = &entries[0].0;
        if entries.iter().any(|(img, _)| !img.same_dims(first)) {
            return Err(Error::invalid("inconsistent exemplar dimensions"));
        }
        entries.sort_by_key(|(_, y)| *y);
        Ok(KnowledgeBase {
            entries,
            classes,
            per_class,
        })
    }

    /// One centred glyph per entry; variant 0 of each class is canonical.
    pub fn build_procedural(classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        if classes == 0 || classes > NUM_GLYPHS {
            return Err(Error::invalid(format!(
                "unsupported class count {classes}; expected 1..={NUM_GLYPHS}"
            )));
        }
        if per_class == 0 {
            return Err(Error::invalid("per-class count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(classes * per_class);
        for class in 0..classes {
            for variant in 0..per_class {
                let (scale, stroke) = if variant == 0 {
                    (1.0, 1.0)
                } else {
                    (
                        rng.random_range(VARIANT_SCALE.0..=VARIANT_SCALE.1),
                        rng.random_range(VARIANT_STROKE.0..=VARIANT_STROKE.1),
                    )
                };
                let jitter = Jitter {
                    scale,
                    ..Jitter::NONE
                };
                entries.push((render_glyph_raw(class, &jitter, stroke)?, class));
            }
        }
        Self::new(entries)
    }

    /// Reads `<class>_<index>.ppm` files; other extensions are ignored.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut names: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        names.sort();
        for path in names {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            let class = stem
                .split_once('_')
                .and_then(|(c, i)| Some((c.parse::<usize>().ok()?, i.parse::<usize>().ok()?)))
                .map(|(c, _)| c)
                .ok_or_else(|| {
                    Error::format(format!("exemplar file {path:?} is not <class>_<index>.ppm"))
                })?;
            let img = Image::read_pnm(&path)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            entries.push((img, class));
        }
        Self::new(entries)
    }

    /// Writes `<class>_<index>.ppm` plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, (img, y)) in self.entries.iter().enumerate() {
            img.write_pnm(&dir.join(format!("{y}_{}.ppm", i % self.per_class)))?;
        }
        let manifest = serde_json::json!({
            "classes": self.classes,
            "per_class": self.per_class,
            "width": self.entries[0].0.width(),
            "height": self.entries[0].0.height(),
            "channels": self.entries[0].0.channels(),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn entries(&self) -> &[(Image, usize)] {
        &self.entries
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Draws `n` entries with replacement, in draw order.
    pub fn sample_batch(
        &self,
        n: usize,
        mode: SamplingMode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Image>, Vec<usize>)> {
        if n > 0 && self.entries.is_empty() {
            return Err(Error::invalid("cannot sample from an empty knowledge base"));
        }
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = match mode {
                SamplingMode::Uniform => rng.random_range(0..self.entries.len()),
                SamplingMode::Stratified => {
                    let class = rng.random_range(0..self.classes);
                    class * self.per_class + rng.random_range(0..self.per_class)
                }
            };
            let (img, y) = &self.entries[idx];
            images.push(img.clone());
            labels.push(*y);
        }
        Ok((images, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{render_glyph, BACKGROUND};

    #[test]
    fn procedural_counts_and_canonical_variant() {
        let kb = KnowledgeBase::build_procedural(10, 2, 7).unwrap();
        assert_eq!(kb.len(), 20);
        assert_eq!((kb.classes(), kb.per_class()), (10, 2));
        for c in 0..10 {
            assert_eq!(kb.entries().iter().filter(|(_, y)| *y == c).count(), 2);
            let canonical = render_glyph(c, &Jitter::NONE).unwrap();
            assert_eq!(kb.entries()[2 * c].0, canonical);
        }
        assert_eq!(kb.entries()[0].0.get(0, 0, 0), BACKGROUND);
        let single = KnowledgeBase::build_procedural(10, 1, 0).unwrap();
        assert_eq!(single.len(), 10);
    }

    #[test]
    fn procedural_is_deterministic() {
        let a = KnowledgeBase::build_procedural(10, 4, 3).unwrap();
        let b = KnowledgeBase::build_procedural(10, 4, 3).unwrap();
        assert_eq!(a, b);
        assert!(KnowledgeBase::build_procedural(11, 1, 0).is_err());
        assert!(KnowledgeBase::build_procedural(10, 0, 0).is_err());
    }

    #[test]
    fn sampling_contract() {
        let kb = KnowledgeBase::build_procedural(10, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (imgs, labels) = kb.sample_batch(0, SamplingMode::Uniform, &mut rng).unwrap();
        assert!(imgs.is_empty() && labels.is_empty());
        let (imgs, labels) = kb.sample_batch(50, SamplingMode::Uniform, &mut rng).unwrap();
        assert_eq!((imgs.len(), labels.len()), (50, 50));
        assert!(labels.iter().all(|&y| y < 10));
        for (img, y) in imgs.iter().zip(&labels) {
            assert!(kb.entries().iter().any(|(e, l)| e == img && l == y));
        }
        let a = kb.sample_batch(30, SamplingMode::Stratified, &mut ChaCha8Rng::seed_from_u64(2));
        let b = kb.sample_batch(30, SamplingMode::Stratified, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kb = KnowledgeBase::build_procedural(10, 2, 7).unwrap();
        kb.save(dir.path()).unwrap();
        let back = KnowledgeBase::load(dir.path()).unwrap();
        assert_eq!((back.classes(), back.per_class()), (10, 2));
        for ((a, ya), (b, yb)) in kb.entries().iter().zip(back.entries()) {
            assert_eq!(ya, yb);
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn load_rejects_bad_directories() {
        let empty = tempfile::tempdir().unwrap();
        let err = KnowledgeBase::load(empty.path()).unwrap_err();
        assert!(err.to_string().contains("no exemplars found"));

        let ragged = tempfile::tempdir().unwrap();
        KnowledgeBase::build_procedural(10, 2, 0)
            .unwrap()
            .save(ragged.path())
            .unwrap();
        fs::copy(ragged.path().join("3_0.ppm"), ragged.path().join("3_2.ppm")).unwrap();
        let err = KnowledgeBase::load(ragged.path()).unwrap_err();
        assert!(err.to_string().contains("ragged class counts"));

        let odd = tempfile::tempdir().unwrap();
        fs::write(odd.path().join("cat.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
        assert!(KnowledgeBase::load(odd.path()).is_err());

        let bad = tempfile::tempdir().unwrap();
        fs::write(bad.path().join("0_0.ppm"), b"P3\n1 1\n255\n").unwrap();
        assert!(KnowledgeBase::load(bad.path()).is_err());
    }
}
