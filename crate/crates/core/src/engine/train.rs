use rand::seq::SliceRandom;
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses;
use crate::model::{forward, ModelConfig, ModelParams, ParamKind};
use crate::stream::source_dataset;
use crate::tensor::{Tape, Tensor};

use super::adam::{adam_update, AdamHyper, Moments};

/// Independent sub-seed for stream `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // SplitMix64 finalizer over the combined input.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub samples: usize,
    pub heldout: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 penalty on weight matrices; gradient `weight_decay · w`.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            samples: 5000,
            heldout: 1000,
            epochs: 20,
            lr: 1e-3,
            batch_size: 50,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub heldout_accuracy: f64,
}

/// Fraction of `labels` predicted correctly, evaluated in chunks.
pub fn accuracy(params: &ModelParams<f32>, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::invalid("accuracy needs matching, non-empty images and labels"));
    }
    let mut right = 0;
    for (imgs, ys) in images.chunks(100).zip(labels.chunks(100)) {
        let preds = params.predict(imgs)?;
        right += preds.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok(right as f64 / images.len() as f64)
}

/// Trains a fresh model on clean jittered glyphs with cross-entropy only.
pub fn train_source(cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainReport)> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 || cfg.heldout == 0 {
        return Err(Error::invalid("batch size and held-out size must be positive"));
    }
    if !(cfg.weight_decay >= 0.0) {
        return Err(Error::invalid(format!(
            "weight decay {} must be non-negative",
            cfg.weight_decay
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate {} must be positive", cfg.lr)));
    }
    let mut params =
        ModelParams::<f32>::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0)))?;
    let (images, labels) = source_dataset(cfg.samples, derive_seed(cfg.seed, 1))?;
    let (held_images, held_labels) = source_dataset(cfg.heldout, derive_seed(cfg.seed, 2))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut moments = Moments::zeros_like(params.tensors());
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let kinds = params.kinds();
    let decay = f32::from_f64(cfg.weight_decay).unwrap_or(0.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::<f32>::new();
            let vars = params.bind(&mut tape, |_| true);
            let step = t + 1;
            let diverged = |e: Error| Error::Diverged {
                step,
                reason: format!("source training epoch {epoch}: {e}"),
            };
            let out = forward(&mut tape, &vars, &imgs, None).map_err(diverged)?;
            let loss = losses::pce(&mut tape, out.logits, &ys).map_err(diverged)?;
            sum += f64::from(tape.value(loss).item()?);
            batches += 1;
            let mut grads = tape.backward(loss).map_err(diverged)?;
            let mut grads: Vec<Option<Tensor<f32>>> =
                vars.all().iter().map(|&v| grads.take(v)).collect();
            if decay > 0.0 {
                for ((g, w), kind) in grads.iter_mut().zip(params.tensors()).zip(&kinds) {
                    if let (Some(g), ParamKind::Weight) = (g, kind) {
                        for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                            *gi += decay * wi;
                        }
                    }
                }
            }
            adam_update(params.tensors_mut(), &grads, &mut moments, step, &hyper)
                .map_err(diverged)?;
            t = step;
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("source epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    let heldout_accuracy = accuracy(&params, &held_images, &held_labels)?;
    Ok((
        params,
        TrainReport {
            epoch_loss,
            heldout_accuracy,
        },
    ))
}
