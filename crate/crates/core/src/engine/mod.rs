//! Online adaptation loop, source training and metric accounting.
//!
//! Each batch is predicted on arrival, before any parameter sees its
//! gradient. The student is then optimized on the combined objective and the
//! teacher follows it by exponential moving average.

mod adam;
mod config;
mod metrics;
mod objective;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, AdamHyper, Moments};
pub use config::{AdaptConfig, Evaluator, Parts, StVariant, UpdateScope};
pub use metrics::{DomainError, MetricsReport, MetricsRow};
pub use objective::{objective, ObjectiveInputs, ObjectiveOut};
pub use train::{accuracy, derive_seed, train_source, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::fourier::style_inject;
use crate::image::Image;
use crate::knowledge::KnowledgeBase;
use crate::losses::LossBreakdown;
use crate::model::{argmax_rows, ema_update, ModelParams};
use crate::stream::{Stream, TargetBatch};
use crate::tensor::{Tape, Tensor};
use metrics::Recorder;

/// Values captured inside a step for offline inspection.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub sampled_images: Vec<Image>,
    pub knowledge_images: Vec<Image>,
    pub knowledge_labels: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub teacher_probs: Option<Tensor<f32>>,
    pub knowledge_logits: Option<Tensor<f32>>,
    pub student_target_probs: Option<Tensor<f32>>,
    pub joint_embeddings: Option<Tensor<f32>>,
    pub joint_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Arrival-time predictions of the evaluated network.
    pub predictions: Vec<usize>,
    pub losses: LossBreakdown,
}

/// Student, teacher and optimizer state of a running episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    config: AdaptConfig,
    student: ModelParams<f32>,
    teacher: ModelParams<f32>,
    moments: Moments<f32>,
    step: u64,
}

impl AdaptState {
    pub fn init(source: &ModelParams<f32>, config: &AdaptConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdaptState {
            config: config.resolved(),
            student: source.clone(),
            teacher: source.clone(),
            moments: Moments::zeros_like(source.tensors()),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn student(&self) -> &ModelParams<f32> {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams<f32> {
        &self.teacher
    }

    pub fn moments(&self) -> &Moments<f32> {
        &self.moments
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Network scored by the evaluator. Without a teacher objective the
    /// teacher never moves, so the student is scored.
    pub fn evaluated(&self) -> &ModelParams<f32> {
        match (self.config.st_variant, self.config.evaluator) {
            (StVariant::TeacherStudent, Evaluator::Teacher) => &self.teacher,
            _ => &self.student,
        }
    }

    /// Predicts `batch`, then adapts on it. On error the state is left as
    /// it was before the call.
    pub fn step(
        &mut self,
        batch: &TargetBatch,
        kb: &KnowledgeBase,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        self.step_traced(batch, kb, rng, None)
    }

    pub fn step_traced(
        &mut self,
        batch: &TargetBatch,
        kb: &KnowledgeBase,
        rng: &mut impl Rng,
        trace: Option<&mut StepTrace>,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        let targets = batch.images();
        let b = targets.len();
        if b == 0 {
            return Err(Error::invalid("empty target batch"));
        }
        let t_next = self.step + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite(op) => Error::Diverged {
                step: t_next,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        };

        // Online predictions and pseudo-labels, from parameters that have
        // not yet seen this batch.
        let pseudo_net = match cfg.st_variant {
            StVariant::TeacherStudent => &self.teacher,
            StVariant::EntropyMin => &self.student,
        };
        let pseudo_probs = pseudo_net.predict_probs(targets).map_err(diverged)?;
        let pseudo_labels = argmax_rows(&pseudo_probs);
        let predictions = if std::ptr::eq(self.evaluated(), pseudo_net) {
            pseudo_labels.clone()
        } else {
            self.evaluated().predict(targets).map_err(diverged)?
        };
        let confident: Vec<usize> = (0..b)
            .filter(|&i| {
                let row = pseudo_probs.row(i);
                f64::from(row[pseudo_labels[i]]) >= cfg.confidence_threshold
            })
            .collect();

        let (sampled, knowledge_labels) = if cfg.parts.uses_knowledge() {
            kb.sample_batch(b, cfg.kb_sampling, rng)?
        } else {
            (Vec::new(), Vec::new())
        };
        let knowledge_images: Vec<Image> = if cfg.parts.input_inject {
            sampled
                .iter()
                .zip(targets)
                .map(|(k, t)| style_inject(k, t, cfg.fourier_beta))
                .collect::<Result<_>>()?
        } else {
            sampled.clone()
        };

        let mut tape = Tape::<f32>::new();
        let scope = cfg.scope();
        let vars = self.student.bind(&mut tape, |k| scope.trains(k));
        let teacher_probs = match cfg.st_variant {
            StVariant::TeacherStudent => Some(&pseudo_probs),
            StVariant::EntropyMin => None,
        };
        let inputs = ObjectiveInputs {
            target_images: targets,
            knowledge_images: &knowledge_images,
            knowledge_labels: &knowledge_labels,
            teacher_probs,
            pseudo_labels: &pseudo_labels,
            confident: &confident,
        };
        let out = objective(&mut tape, &vars, &cfg.parts, cfg.st_variant, cfg.tau, &inputs)
            .map_err(diverged)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step: t_next,
                reason: "non-finite total loss".into(),
            });
        }
        let mut grads = tape.backward(out.total).map_err(diverged)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.all().iter().map(|&v| grads.take(v)).collect();

        let mut student = self.student.clone();
        let mut moments = self.moments.clone();
        let hyper = AdamHyper {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        };
        adam_update(student.tensors_mut(), &grads, &mut moments, t_next, &hyper)
            .map_err(diverged)?;
        if student
            .tensors()
            .iter()
            .any(|t| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                step: t_next,
                reason: "non-finite parameter after update".into(),
            });
        }
        let teacher = match cfg.st_variant {
            StVariant::TeacherStudent => ema_update(&self.teacher, &student, cfg.ema_momentum)?,
            StVariant::EntropyMin => self.teacher.clone(),
        };

        if let Some(tr) = trace {
            let val = |v: Option<crate::tensor::Var>| v.map(|v| tape.value(v).clone());
            *tr = StepTrace {
                sampled_images: sampled,
                knowledge_images,
                knowledge_labels,
                pseudo_labels,
                teacher_probs: teacher_probs.cloned(),
                knowledge_logits: val(out.knowledge_logits),
                student_target_probs: val(out.student_target_probs),
                joint_embeddings: val(out.joint_embeddings),
                joint_labels: out.joint_labels.clone(),
            };
        }

        self.student = student;
        self.teacher = teacher;
        self.moments = moments;
        self.step = t_next;
        Ok(StepOutput {
            predictions,
            losses: out.breakdown,
        })
    }

    /// Steps through `stream` in order, scoring each batch on arrival.
    pub fn run(
        &mut self,
        stream: &Stream,
        kb: &KnowledgeBase,
        rng: &mut impl Rng,
    ) -> Result<MetricsReport> {
        let mut rec = Recorder::default();
        for batch in stream.batches() {
            let out = self.step(batch.target(), kb, rng)?;
            let wrong = batch.labels().count_errors(&out.predictions)?;
            rec.record(
                self.step,
                batch.domain(),
                wrong,
                batch.target().len(),
                &out.losses,
                self.config.lr,
                self.config.seed,
            );
        }
        Ok(rec.finish())
    }
}

/// Adapts a fresh copy of `source` over the whole stream.
pub fn run_episode(
    source: &ModelParams<f32>,
    config: &AdaptConfig,
    stream: &Stream,
    kb: &KnowledgeBase,
) -> Result<MetricsReport> {
    let mut state = AdaptState::init(source, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    state.run(stream, kb, &mut rng)
}

/// Scores `source` on every batch without adapting.
pub fn evaluate_frozen(source: &ModelParams<f32>, stream: &Stream) -> Result<MetricsReport> {
    let mut rec = Recorder::default();
    for (i, batch) in stream.batches().iter().enumerate() {
        let preds = source.predict(batch.target().images())?;
        let wrong = batch.labels().count_errors(&preds)?;
        let losses = LossBreakdown::default();
        rec.record(
            i as u64 + 1,
            batch.domain(),
            wrong,
            batch.target().len(),
            &losses,
            0.0,
            0,
        );
    }
    Ok(rec.finish())
}
