use super::losses::{prototype_distance, symmetric_cross_entropy};
use super::{digest_parts, HyperparamConfig, MethodKind, SourcePrototypes, StepOutput, TtaMethod, TEACHER_EMA};
use crate::augment::AugmentationPipeline;
use crate::batch::Batch;
use crate::error::Result;
use crate::model::{AdaptableModel, ModelState, NormMode, ParamScope};
use crate::prob::{argmax_rows, softmax_rows};
use crate::rng::derive_seed;

/// Source-free mean teacher: symmetric cross-entropy between a student on
/// augmented inputs and a teacher on clean inputs, plus a pull of student
/// features towards the source prototype of the teacher's class.
#[derive(Debug, Clone)]
pub struct RmtSf {
    student: AdaptableModel,
    teacher: AdaptableModel,
    source: ModelState,
    hp: HyperparamConfig,
    prototypes: Option<SourcePrototypes>,
    pipeline: AugmentationPipeline,
    seed: u64,
    steps: u64,
}

impl RmtSf {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig, prototypes: Option<SourcePrototypes>, seed: u64) -> Self {
        model.set_norm_mode(NormMode::UseRunning);
        model.clear_optimizer_slots();
        if prototypes.is_none() {
            log::warn!("rmt-sf: no source prototypes, running without the prototype term");
        }
        let source = model.snapshot();
        RmtSf {
            teacher: model.clone(),
            student: model,
            source,
            hp,
            prototypes,
            pipeline: AugmentationPipeline::consistency(),
            seed,
            steps: 0,
        }
    }

    /// Replace the student's augmentation (identity is useful for checks).
    pub fn with_pipeline(mut self, pipeline: AugmentationPipeline) -> Self {
        self.pipeline = pipeline;
        self
    }

    pub fn student(&self) -> &AdaptableModel {
        &self.student
    }
}

impl TtaMethod for RmtSf {
    fn kind(&self) -> MethodKind {
        MethodKind::RmtSf
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let x = batch.samples();
        let teacher = self.teacher.forward(x)?;
        let seed = derive_seed(self.seed, &["rmt-sf", &self.steps.to_string()]);
        let xa = self.pipeline.apply_batch(x, seed)?;
        let student = self.student.forward(&xa)?;

        let (mut loss, d_logits) = symmetric_cross_entropy(&student.logits, &teacher.logits);
        let d_features = match &self.prototypes {
            Some(p) => {
                let assign = argmax_rows(&teacher.logits);
                let (l, g) = prototype_distance(&student.features, &p.vectors, &assign);
                loss += l;
                Some(g)
            }
            None => None,
        };
        let grads = self.student.backward(&student.tape, &d_logits, d_features.as_ref(), ParamScope::All);
        self.student.sgd_step(&grads, self.hp.lr, self.hp.momentum, ParamScope::All);
        self.teacher.ema_towards(&self.student, TEACHER_EMA);
        self.steps += 1;
        Ok(StepOutput {
            probs: softmax_rows(&teacher.logits),
            loss: Some(loss),
            reset: false,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.teacher
    }

    fn reset(&mut self) {
        self.student.restore(&self.source).expect("source state matches model");
        self.teacher.restore(&self.source).expect("source state matches model");
        self.steps = 0;
    }

    fn digest(&self) -> [u8; 32] {
        digest_parts(&[&self.student.state_hash(), &self.teacher.state_hash(), &self.steps.to_le_bytes()])
    }
}
