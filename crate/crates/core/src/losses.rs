//! Training objectives: proxy cross-entropy on knowledge samples,
//! supervised contrastive alignment over the joint batch, symmetric
//! cross-entropy self-training, entropy minimization, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probability floor inside every loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-5;
const UNIT_NORM_TOL: f64 = 1e-4;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn check_prob_rows<T: Scalar>(p: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if p.rank() != 2 || p.shape()[0] == 0 {
        return Err(Error::invalid(format!("{what} must be a non-empty [B, C] matrix")));
    }
    let c = p.shape()[1];
    for row in p.data().chunks_exact(c) {
        let s: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid(format!(
                "{what} row is not a distribution (sum {s})"
            )));
        }
    }
    Ok((p.shape()[0], c))
}

/// Mean cross-entropy of `logits: [B, C]` against integer labels.
pub fn pce<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("pce expects non-empty [B, C] logits"));
    }
    let (b, c) = (shape[0], shape[1]);
    check_labels(labels, b, c)?;
    let onehot = tape.constant(Tensor::from_fn(&[b, c], |i| {
        if labels[i / c] == i % c {
            T::one()
        } else {
            T::zero()
        }
    }));
    let probs = tape.softmax(logits)?;
    let picked = tape.mul(probs, onehot)?;
    let picked = tape.sum(picked, &[1])?;
    let logp = tape.log_floor(picked, T::c(PROB_FLOOR))?;
    let mean = tape.mean_all(logp)?;
    tape.neg(mean)
}

/// Result of [`scl`]: the loss and the number of anchors that had at least
/// one positive.
#[derive(Clone, Copy, Debug)]
pub struct SclOutput {
    pub loss: Var,
    pub anchors: usize,
}

/// Supervised contrastive loss over unit-norm `embeddings: [N, D]`.
///
/// For each anchor `i` with positives `P(i)` (same label, `p ≠ i`):
/// `−(1/|P(i)|) Σ_p log( exp(s_ip/τ) / Σ_{j≠i} exp(s_ij/τ) )`, averaged over
/// anchors that have positives. With no such anchor the loss is zero.
pub fn scl<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
) -> Result<SclOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("scl expects [N, D] embeddings"));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid(format!("scl needs at least 2 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    for row in tape.value(embeddings).data().chunks_exact(shape[1]) {
        let norm = row
            .iter()
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("embedding norm {norm} is not unit")));
        }
    }

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        log::warn!("supervised contrastive batch of {n} has no positive pairs");
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(SclOutput { loss: zero, anchors });
    }

    let et = tape.transpose(embeddings)?;
    let sim = tape.matmul(embeddings, et)?;
    // Shifting every logit by the upper bound 1/τ leaves each ratio intact
    // and keeps exp() from overflowing at small temperatures.
    let scaled = tape.scale(sim, T::c(1.0 / tau))?;
    let logits = tape.add_scalar(scaled, T::c(-1.0 / tau))?;
    let off_diag = tape.constant(Tensor::from_fn(&[n, n], |k| {
        if k / n == k % n {
            T::zero()
        } else {
            T::one()
        }
    }));
    let e = tape.exp(logits)?;
    let e = tape.mul(e, off_diag)?;
    let denom = tape.sum(e, &[1])?;
    let log_denom = tape.log_floor(denom, T::c(PROB_FLOOR))?;

    let pos_weight = tape.constant(Tensor::from_fn(&[n, n], |k| {
        let (i, p) = (k / n, k % n);
        if i != p && labels[i] == labels[p] {
            T::c(1.0 / positives[i] as f64)
        } else {
            T::zero()
        }
    }));
    let anchor_mask = tape.constant(Tensor::from_fn(&[n], |i| {
        if positives[i] > 0 {
            T::one()
        } else {
            T::zero()
        }
    }));
    let pos = tape.mul(logits, pos_weight)?;
    let pos = tape.sum_all(pos)?;
    let den = tape.mul(log_denom, anchor_mask)?;
    let den = tape.sum_all(den)?;
    let diff = tape.sub(den, pos)?;
    let loss = tape.scale(diff, T::c(1.0 / anchors as f64))?;
    Ok(SclOutput { loss, anchors })
}

/// Symmetric cross-entropy between student probabilities `p` (on the tape)
/// and detached teacher probabilities `q`, averaged over the batch.
pub fn symmetric_ce<T: Scalar>(tape: &mut Tape<T>, p: Var, q: &Tensor<T>) -> Result<Var> {
    let (b, _) = check_prob_rows(tape.value(p), "student probabilities")?;
    check_prob_rows(q, "teacher probabilities")?;
    if tape.shape(p) != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "symmetric_ce",
            lhs: tape.shape(p).to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let floor = T::c(PROB_FLOOR);
    let qv = tape.constant(q.clone());
    let log_q = tape.constant(q.map(|v| v.max(floor).ln()));
    let log_p = tape.log_floor(p, floor)?;
    let a = tape.mul(qv, log_p)?;
    let bterm = tape.mul(p, log_q)?;
    let s = tape.add(a, bterm)?;
    let s = tape.sum_all(s)?;
    tape.scale(s, T::c(-1.0 / b as f64))
}

/// Mean Shannon entropy of the rows of `p`.
pub fn entropy<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let (b, _) = check_prob_rows(tape.value(p), "probabilities")?;
    let log_p = tape.log_floor(p, T::c(PROB_FLOOR))?;
    let plogp = tape.mul(p, log_p)?;
    let s = tape.sum_all(plogp)?;
    tape.scale(s, T::c(-1.0 / b as f64))
}

/// Per-term loss values; a disabled term is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pce: Option<f64>,
    pub scl: Option<f64>,
    pub st: Option<f64>,
    pub total: f64,
}

/// Loss terms that were computed for a step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub pce: Option<Var>,
    pub scl: Option<Var>,
    pub st: Option<Var>,
}

/// Unweighted sum of the enabled terms.
pub fn total<T: Scalar>(tape: &mut Tape<T>, terms: LossTerms) -> Result<(Var, LossBreakdown)> {
    let present: Vec<Var> = [terms.pce, terms.scl, terms.st].into_iter().flatten().collect();
    let (&first, rest) = present
        .split_first()
        .ok_or_else(|| Error::invalid("no loss term enabled"))?;
    let mut sum = first;
    for &v in rest {
        sum = tape.add(sum, v)?;
    }
    let read = |tape: &Tape<T>, v: Option<Var>| -> Result<Option<f64>> {
        v.map(|v| tape.value(v).item().map(|x| x.to_f64().unwrap()))
            .transpose()
    };
    let breakdown = LossBreakdown {
        pce: read(tape, terms.pce)?,
        scl: read(tape, terms.scl)?,
        st: read(tape, terms.st)?,
        total: tape.value(sum).item()?.to_f64().unwrap(),
    };
    Ok((sum, breakdown))
}
