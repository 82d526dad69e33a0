use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::stream::DomainSpec;

/// One line of the per-batch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub domain_kind: String,
    pub severity: u8,
    pub batch_error: f64,
    pub cum_error: f64,
    pub loss_pce: Option<f64>,
    pub loss_scl: Option<f64>,
    pub loss_st: Option<f64>,
    pub loss_total: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain: DomainSpec,
    pub batches: usize,
    pub mean_error: f64,
}

/// Online evaluation of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// In first-appearance order.
    pub per_domain: Vec<DomainError>,
    /// Mean of the per-domain mean errors.
    pub mean_error: f64,
    /// Fraction of all samples mispredicted.
    pub sample_error: f64,
}

impl MetricsReport {
    pub fn error_for(&self, domain: DomainSpec) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|d| d.domain == domain)
            .map(|d| d.mean_error)
    }

    /// Writes the table; absent loss terms become empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("metrics csv: {e}"))
}

/// Accumulates per-batch results in arrival order.
#[derive(Debug, Default)]
pub(crate) struct Recorder {
    rows: Vec<MetricsRow>,
    domains: Vec<(DomainSpec, f64, usize)>,
    wrong: usize,
    seen: usize,
}

impl Recorder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record(
        &mut self,
        step: u64,
        domain: DomainSpec,
        wrong: usize,
        size: usize,
        losses: &LossBreakdown,
        lr: f64,
        seed: u64,
    ) {
        self.wrong += wrong;
        self.seen += size;
        let batch_error = wrong as f64 / size.max(1) as f64;
        match self.domains.iter_mut().find(|(d, _, _)| *d == domain) {
            Some(entry) => {
                entry.1 += batch_error;
                entry.2 += 1;
            }
            None => self.domains.push((domain, batch_error, 1)),
        }
        self.rows.push(MetricsRow {
            step,
            domain_kind: domain.kind().name().to_string(),
            severity: domain.severity(),
            batch_error,
            cum_error: self.wrong as f64 / self.seen.max(1) as f64,
            loss_pce: losses.pce,
            loss_scl: losses.scl,
            loss_st: losses.st,
            loss_total: losses.total,
            lr,
            seed,
        });
    }

    pub(crate) fn finish(self) -> MetricsReport {
        let per_domain: Vec<DomainError> = self
            .domains
            .into_iter()
            .map(|(domain, sum, batches)| DomainError {
                domain,
                batches,
                mean_error: sum / batches as f64,
            })
            .collect();
        let mean_error = if per_domain.is_empty() {
            0.0
        } else {
            per_domain.iter().map(|d| d.mean_error).sum::<f64>() / per_domain.len() as f64
        };
        MetricsReport {
            rows: self.rows,
            per_domain,
            mean_error,
            sample_error: self.wrong as f64 / self.seen.max(1) as f64,
        }
    }
}
