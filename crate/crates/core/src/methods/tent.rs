use super::losses::mean_entropy_loss;
use super::{digest_parts, require_norm_affine, HyperparamConfig, MethodKind, StepOutput, TtaMethod};
use crate::batch::Batch;
use crate::error::Result;
use crate::model::{AdaptableModel, ModelState, NormMode, ParamGroup, ParamScope};
use crate::prob::softmax_rows;

/// Entropy minimization over normalization-affine parameters.
#[derive(Debug, Clone)]
pub struct Tent {
    model: AdaptableModel,
    source: ModelState,
    hp: HyperparamConfig,
}

impl Tent {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig) -> Result<Self> {
        require_norm_affine(MethodKind::Tent, &model)?;
        model.set_norm_mode(NormMode::UseBatch);
        model.clear_optimizer_slots();
        let source = model.snapshot();
        Ok(Tent { model, source, hp })
    }
}

const SCOPE: ParamScope = ParamScope::Only(ParamGroup::NormalizationAffine);

impl TtaMethod for Tent {
    fn kind(&self) -> MethodKind {
        MethodKind::Tent
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let fwd = self.model.forward(batch.samples())?;
        let (loss, d_logits) = mean_entropy_loss(&fwd.logits);
        let grads = self.model.backward(&fwd.tape, &d_logits, None, SCOPE);
        self.model.sgd_step(&grads, self.hp.lr, self.hp.momentum, SCOPE);
        self.model.commit_running_stats(&fwd.tape);
        Ok(StepOutput {
            probs: softmax_rows(&fwd.logits),
            loss: Some(loss),
            reset: false,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.model
    }

    fn reset(&mut self) {
        self.model.restore(&self.source).expect("source state matches model");
    }

    fn digest(&self) -> [u8; 32] {
        digest_parts(&[&self.model.state_hash()])
    }
}
