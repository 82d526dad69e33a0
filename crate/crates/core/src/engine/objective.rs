use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{self, LossBreakdown, LossTerms};
use crate::model::{extract_stats, forward, ParamVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::config::{Parts, StVariant};

/// Everything the adaptation objective consumes besides the student.
pub struct ObjectiveInputs<'a, T> {
    pub target_images: &'a [Image],
    /// Knowledge images after any input-level restyling.
    pub knowledge_images: &'a [Image],
    pub knowledge_labels: &'a [usize],
    /// Detached teacher probabilities; required for the teacher-student
    /// self-training term.
    pub teacher_probs: Option<&'a Tensor<T>>,
    /// One pseudo-label per target image.
    pub pseudo_labels: &'a [usize],
    /// Target rows that join the contrastive batch.
    pub confident: &'a [usize],
}

/// Loss graph plus the intermediates needed to recompute it offline.
pub struct ObjectiveOut {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub knowledge_logits: Option<Var>,
    pub student_target_probs: Option<Var>,
    pub joint_embeddings: Option<Var>,
    pub joint_labels: Vec<usize>,
}

/// Records the combined objective for one batch on `tape`.
///
/// The student sees the raw target batch once; its shallow-feature
/// statistics restyle the knowledge batch when `parts.stat_bridge` is set,
/// and gradients flow through both passes.
pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    student: &ParamVars,
    parts: &Parts,
    variant: StVariant,
    tau: f64,
    inputs: &ObjectiveInputs<'_, T>,
) -> Result<ObjectiveOut> {
    if !parts.any_loss() {
        return Err(Error::invalid("no loss term enabled"));
    }
    let b = inputs.target_images.len();
    if inputs.pseudo_labels.len() != b {
        return Err(Error::invalid(format!(
            "{} pseudo-labels for {b} target images",
            inputs.pseudo_labels.len()
        )));
    }
    if inputs.knowledge_images.len() != inputs.knowledge_labels.len() {
        return Err(Error::invalid("knowledge images and labels differ in length"));
    }
    let use_kb = parts.uses_knowledge();
    if use_kb && inputs.knowledge_images.is_empty() {
        return Err(Error::invalid("knowledge batch required but empty"));
    }

    let need_target = parts.st || parts.scl || (use_kb && parts.stat_bridge);
    let target = if need_target {
        Some(forward(tape, student, inputs.target_images, None)?)
    } else {
        None
    };

    let knowledge = if use_kb {
        let stats = match (&target, parts.stat_bridge) {
            (Some(t), true) => Some(extract_stats(tape, t.shallow)?),
            _ => None,
        };
        Some(forward(tape, student, inputs.knowledge_images, stats.as_ref())?)
    } else {
        None
    };

    let mut terms = LossTerms::default();
    if parts.pce {
        let k = knowledge.as_ref().expect("knowledge forward ran");
        terms.pce = Some(losses::pce(tape, k.logits, inputs.knowledge_labels)?);
    }

    let mut joint_embeddings = None;
    let mut joint_labels = Vec::new();
    if parts.scl {
        let k = knowledge.as_ref().expect("knowledge forward ran");
        let t = target.as_ref().expect("target forward ran");
        joint_labels.extend_from_slice(inputs.knowledge_labels);
        let joint = if inputs.confident.is_empty() {
            k.embedding
        } else {
            let kept = tape.select_rows(t.embedding, inputs.confident)?;
            joint_labels.extend(inputs.confident.iter().map(|&i| inputs.pseudo_labels[i]));
            tape.concat_rows(&[k.embedding, kept])?
        };
        joint_embeddings = Some(joint);
        terms.scl = Some(losses::scl(tape, joint, &joint_labels, tau)?.loss);
    }

    if parts.st {
        let t = target.as_ref().expect("target forward ran");
        terms.st = Some(match variant {
            StVariant::TeacherStudent => {
                let q = inputs.teacher_probs.ok_or_else(|| {
                    Error::invalid("teacher probabilities required for teacher-student loss")
                })?;
                losses::symmetric_ce(tape, t.probs, q)?
            }
            StVariant::EntropyMin => losses::entropy(tape, t.probs)?,
        });
    }

    let (total, breakdown) = losses::total(tape, terms)?;
    Ok(ObjectiveOut {
        total,
        breakdown,
        knowledge_logits: knowledge.map(|k| k.logits),
        student_target_probs: target.map(|t| t.probs),
        joint_embeddings,
        joint_labels,
    })
}
