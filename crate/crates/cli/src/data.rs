//! On-disk streams: one tensor container per batch, a manifest of domain
//! tags, and hidden labels in a separate evaluator-only file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stylebridge::stream::{Batch, DomainSpec, Stream};
use stylebridge::tensor::{io, Tensor};
use stylebridge::Image;

use crate::config::{read_json, write_json};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "stream.json";
pub const LABELS: &str = "labels.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub file: String,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub batches: Vec<BatchEntry>,
    pub shuffled: bool,
    pub fingerprint: String,
}

/// Writes `stream` under `dir`, which must exist.
pub fn save_stream(stream: &Stream, dir: &Path) -> CliResult<()> {
    let mut entries = Vec::with_capacity(stream.len());
    let mut labels = Vec::with_capacity(stream.len());
    for (i, batch) in stream.batches().iter().enumerate() {
        let images = batch.target().images();
        let first = &images[0];
        let shape = [images.len(), first.channels(), first.height(), first.width()];
        let data: Vec<f32> = images.iter().flat_map(|img| img.data().iter().copied()).collect();
        let file = format!("batch_{i:04}.bin");
        io::save(&Tensor::new(&shape, data)?, &dir.join(&file))?;
        entries.push(BatchEntry {
            file,
            domain: batch.domain().to_string(),
        });
        labels.push(batch.labels().reveal().to_vec());
    }
    write_json(
        &dir.join(MANIFEST),
        &StreamManifest {
            batches: entries,
            shuffled: stream.is_shuffled(),
            fingerprint: stream.fingerprint(),
        },
    )?;
    write_json(&dir.join(LABELS), &labels)
}

/// Reads a stream written by [`save_stream`] and checks its fingerprint.
pub fn load_stream(dir: &Path) -> CliResult<(Stream, StreamManifest)> {
    let manifest: StreamManifest = read_json(&dir.join(MANIFEST))?;
    let labels: Vec<Vec<usize>> = read_json(&dir.join(LABELS))?;
    if labels.len() != manifest.batches.len() {
        return Err(CliError::data(format!(
            "{}: {} label rows for {} batches",
            dir.display(),
            labels.len(),
            manifest.batches.len()
        )));
    }
    let mut batches = Vec::with_capacity(labels.len());
    for (entry, ys) in manifest.batches.iter().zip(labels) {
        let t: Tensor<f32> = io::load(&dir.join(&entry.file))?;
        let &[n, c, h, w] = t.shape() else {
            return Err(CliError::data(format!("{}: expected [B, C, H, W]", entry.file)));
        };
        let images = t
            .data()
            .chunks_exact(c * h * w)
            .map(|px| Image::new(w, h, c, px.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        debug_assert_eq!(images.len(), n);
        let domain: DomainSpec = entry.domain.parse()?;
        batches.push(Batch::new(images, ys, domain)?);
    }
    let stream = Stream::from_batches(batches)?;
    if stream.fingerprint() != manifest.fingerprint {
        return Err(CliError::data(format!(
            "{}: stream contents do not match the manifest fingerprint",
            dir.display()
        )));
    }
    Ok((stream, manifest))
}
