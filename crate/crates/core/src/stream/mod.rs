//! Procedural source data and corrupted target-domain streams.
//!
//! Adapters see a [`TargetBatch`], which carries images and the domain tag
//! only. Ground-truth labels live in [`HiddenLabels`], which can only be
//! consumed by scoring predictions against them.

mod corrupt;
mod glyph;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use corrupt::{
    corrupt, CorruptionKind, DomainSpec, BLUR_PASSES, BLUR_RADIUS, BRIGHTNESS_SHIFT,
    CONTRAST_FACTOR, FOG_ALPHA, GAUSSIAN_SIGMA, IMPULSE_FRACTION, MAX_SEVERITY, PIXELATE_BLOCK,
    SHOT_PHOTONS,
};
pub use glyph::{
    render_glyph, render_glyph_raw, Jitter, BACKGROUND, FOREGROUND, GLYPH_IMAGE_SIZE,
    GLYPH_NAMES, NUM_GLYPHS,
};

use crate::error::{Error, Result};
use crate::image::Image;

/// Adapter-facing view of a batch: no label accessor exists.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    images: Vec<Image>,
    domain: DomainSpec,
}

impl TargetBatch {
    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn domain(&self) -> DomainSpec {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Evaluator-only ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    /// Number of predictions that disagree with the hidden labels.
    pub fn count_errors(&self, predictions: &[usize]) -> Result<usize> {
        if predictions.len() != self.0.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                predictions.len(),
                self.0.len()
            )));
        }
        Ok(predictions.iter().zip(&self.0).filter(|(p, y)| p != y).count())
    }

    /// Fraction of mispredicted samples.
    pub fn error_rate(&self, predictions: &[usize]) -> Result<f64> {
        Ok(self.count_errors(predictions)? as f64 / self.0.len().max(1) as f64)
    }

    /// Raw labels, for evaluator-side persistence only.
    pub fn reveal(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One stream element: target images plus their hidden labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    target: TargetBatch,
    labels: HiddenLabels,
}

impl Batch {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, domain: DomainSpec) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            target: TargetBatch { images, domain },
            labels: HiddenLabels(labels),
        })
    }

    pub fn target(&self) -> &TargetBatch {
        &self.target
    }

    pub fn labels(&self) -> &HiddenLabels {
        &self.labels
    }

    pub fn domain(&self) -> DomainSpec {
        self.target.domain
    }
}

/// Ordered sequence of batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    batches: Vec<Batch>,
    shuffled: bool,
}

impl Stream {
    pub fn from_batches(batches: Vec<Batch>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::invalid("stream has no batches"));
        }
        Ok(Stream {
            batches,
            shuffled: false,
        })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn is_shuffled(&self) -> bool {
        self.shuffled
    }

    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(|b| b.target.len()).sum()
    }

    /// Distinct domains in first-appearance order.
    pub fn domains(&self) -> Vec<DomainSpec> {
        let mut out: Vec<DomainSpec> = Vec::new();
        for b in &self.batches {
            if !out.contains(&b.domain()) {
                out.push(b.domain());
            }
        }
        out
    }

    /// SHA-256 over domain tags, labels and pixel bytes, in stream order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for b in &self.batches {
            hasher.update(b.domain().to_string().as_bytes());
            for &y in &b.labels.0 {
                hasher.update((y as u64).to_le_bytes());
            }
            for img in &b.target.images {
                hasher.update((img.width() as u64).to_le_bytes());
                hasher.update((img.height() as u64).to_le_bytes());
                hasher.update((img.channels() as u64).to_le_bytes());
                for v in img.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Draws `n` jittered clean glyphs with uniformly sampled classes.
pub fn sample_glyphs(n: usize, rng: &mut impl Rng) -> Result<(Vec<Image>, Vec<usize>)> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..NUM_GLYPHS);
        let jitter = Jitter::sample(rng);
        images.push(render_glyph(class, &jitter)?);
        labels.push(class);
    }
    Ok((images, labels))
}

/// Clean labelled source data, deterministic in `seed`.
pub fn source_dataset(n: usize, seed: u64) -> Result<(Vec<Image>, Vec<usize>)> {
    sample_glyphs(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Emits `batches_per_domain` corrupted batches for each domain, in order.
pub fn make_stream(
    domains: &[DomainSpec],
    batches_per_domain: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Stream> {
    if domains.is_empty() {
        return Err(Error::invalid("empty domain list"));
    }
    if batch_size == 0 || batches_per_domain == 0 {
        return Err(Error::invalid(
            "batch size and batches per domain must be at least 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::with_capacity(domains.len() * batches_per_domain);
    for &domain in domains {
        for _ in 0..batches_per_domain {
            let (clean, labels) = sample_glyphs(batch_size, &mut rng)?;
            let images = clean
                .iter()
                .map(|img| corrupt(img, domain, &mut rng))
                .collect();
            batches.push(Batch::new(images, labels, domain)?);
        }
    }
    Stream::from_batches(batches)
}

/// Batch-level random permutation; batch contents are untouched.
pub fn shuffle_mixed(stream: Stream, seed: u64) -> Result<Stream> {
    let mut batches = stream.batches;
    if batches.is_empty() {
        return Err(Error::invalid("cannot shuffle an empty stream"));
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Stream {
        batches,
        shuffled: true,
    })
}
