//! One adaptation episode from a resolved configuration, and its outputs.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stylebridge::engine::{derive_seed, run_episode, MetricsReport, StVariant, UpdateScope};
use stylebridge::knowledge::KnowledgeBase;
use stylebridge::model::ModelParams;
use stylebridge::stream::{make_stream, shuffle_mixed, Stream};

use crate::config::{write_json, RunConfig};
use crate::data::load_stream;
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub fingerprint: String,
    pub shuffled: bool,
    pub batches: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub batches: usize,
    pub mean_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub st_variant: StVariant,
    pub update_scope: UpdateScope,
    pub stream: StreamInfo,
    pub per_domain: Vec<DomainSummary>,
    pub mean_error: f64,
    pub sample_error: f64,
    pub wall_time_secs: f64,
    /// Fully resolved configuration of the run.
    pub config: RunConfig,
}

pub fn load_source(dir: &Path) -> CliResult<ModelParams<f32>> {
    if !dir.join("checkpoint.json").is_file() {
        return Err(CliError::data(format!(
            "no source checkpoint at {} (run train-source first)",
            dir.display()
        )));
    }
    Ok(ModelParams::load(dir)?)
}

/// Builds or loads the stream of a resolved config; the mixed flag shuffles
/// batches with a seed derived from the stream seed.
pub fn build_stream(cfg: &RunConfig) -> CliResult<(Stream, bool)> {
    let seed = cfg.stream.seed.expect("resolved config");
    let (stream, stored_shuffled) = match &cfg.stream.path {
        Some(dir) => {
            let (s, m) = load_stream(dir)?;
            (s, m.shuffled)
        }
        None => (
            make_stream(
                &cfg.stream.parsed_domains()?,
                cfg.stream.batches_per_domain,
                cfg.adapt.batch_size,
                seed,
            )?,
            false,
        ),
    };
    if cfg.stream.mixed {
        Ok((shuffle_mixed(stream, derive_seed(seed, 1))?, true))
    } else {
        Ok((stream, stored_shuffled))
    }
}

pub fn build_kb(cfg: &RunConfig) -> CliResult<KnowledgeBase> {
    Ok(match &cfg.kb.path {
        Some(dir) => KnowledgeBase::load(dir)?,
        None => KnowledgeBase::build_procedural(
            cfg.kb.classes,
            cfg.kb.per_class,
            cfg.kb.seed.expect("resolved config"),
        )?,
    })
}

/// Runs the episode and writes `metrics.csv` and `summary.json` into `out`.
pub fn execute(
    cfg: &RunConfig,
    source: &ModelParams<f32>,
    stream: &Stream,
    shuffled: bool,
    kb: &KnowledgeBase,
    out: &Path,
) -> CliResult<Summary> {
    let start = Instant::now();
    let report = run_episode(source, &cfg.adapt, stream, kb)?;
    let wall_time_secs = start.elapsed().as_secs_f64();
    let summary = summarize(cfg, stream, shuffled, &report, wall_time_secs);
    let path = out.join(METRICS_FILE);
    report.write_csv(File::create(&path).map_err(|e| CliError::io(&path, e))?)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn summarize(
    cfg: &RunConfig,
    stream: &Stream,
    shuffled: bool,
    report: &MetricsReport,
    wall_time_secs: f64,
) -> Summary {
    Summary {
        st_variant: cfg.adapt.st_variant,
        update_scope: cfg.adapt.scope(),
        stream: StreamInfo {
            fingerprint: stream.fingerprint(),
            shuffled,
            batches: stream.len(),
            samples: stream.num_samples(),
        },
        per_domain: report
            .per_domain
            .iter()
            .map(|d| DomainSummary {
                domain: d.domain.to_string(),
                batches: d.batches,
                mean_error: d.mean_error,
            })
            .collect(),
        mean_error: report.mean_error,
        sample_error: report.sample_error,
        wall_time_secs,
        config: cfg.clone(),
    }
}
