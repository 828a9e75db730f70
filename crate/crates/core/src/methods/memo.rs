use ndarray::{s, Array2, Array4, Axis};
use sha2::{Digest, Sha256};

use super::losses::marginal_entropy;
use super::{digest_parts, HyperparamConfig, MethodKind, StepOutput, TtaMethod};
use crate::augment::AugmentationPipeline;
use crate::batch::Batch;
use crate::error::Result;
use crate::model::{AdaptableModel, ModelState, NormMode, ParamScope};
use crate::prob::softmax_rows;
use crate::rng::derive_seed;

/// Per-sample marginal entropy minimization over augmented views, with the
/// model reset to the source state after every sample.
#[derive(Debug, Clone)]
pub struct Memo {
    model: AdaptableModel,
    source: ModelState,
    hp: HyperparamConfig,
    pipeline: AugmentationPipeline,
    seed: u64,
}

impl Memo {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig, seed: u64) -> Self {
        model.set_norm_mode(NormMode::UseRunning);
        model.clear_optimizer_slots();
        let source = model.snapshot();
        Memo {
            model,
            source,
            hp,
            pipeline: AugmentationPipeline::strong(),
            seed,
        }
    }

    /// Views depend only on the sample's content and the run seed, so a
    /// sample gets the same views wherever it appears in the stream.
    fn view_seed(&self, sample: &[f64]) -> u64 {
        let mut h = Sha256::new();
        for v in sample {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        let tag = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        derive_seed(self.seed, &["memo", &tag.to_string()])
    }

    fn adapt_one(&mut self, sample: &Array4<f64>) -> Result<(Vec<f64>, f64)> {
        let v = self.hp.memo_augs.max(1);
        let flat: Vec<f64> = sample.iter().copied().collect();
        let views = sample.broadcast((v, sample.shape()[1], sample.shape()[2], sample.shape()[3])).expect("broadcast").to_owned();
        let views = self.pipeline.apply_batch(&views, self.view_seed(&flat))?;
        let fwd = self.model.forward(&views)?;
        let (loss, d) = marginal_entropy(&fwd.logits);
        let grads = self.model.backward(&fwd.tape, &d, None, ParamScope::All);
        self.model.sgd_step(&grads, self.hp.lr, self.hp.momentum, ParamScope::All);
        let out = self.model.forward(sample)?;
        let p = softmax_rows(&out.logits).row(0).to_vec();
        self.model.restore(&self.source)?;
        Ok((p, loss))
    }
}

impl TtaMethod for Memo {
    fn kind(&self) -> MethodKind {
        MethodKind::Memo
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let x = batch.samples();
        let b = x.shape()[0];
        let mut probs = Array2::zeros((b, self.model.num_classes()));
        let mut total = 0.0;
        for i in 0..b {
            let sample = x.slice(s![i..i + 1, .., .., ..]).to_owned();
            let (p, loss) = self.adapt_one(&sample)?;
            probs.index_axis_mut(Axis(0), i).assign(&ndarray::Array1::from(p));
            total += loss;
        }
        Ok(StepOutput {
            probs,
            loss: Some(total / b.max(1) as f64),
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
