use ndarray::Array2;

use super::losses::{entropies, weighted_entropy};
use super::{digest_parts, f64_bytes, require_norm_affine, FisherWeights, HyperparamConfig, MethodKind, StepOutput, TtaMethod};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::{AdaptableModel, Grads, ModelState, NormMode, ParamGroup, ParamScope};
use crate::prob::softmax_rows;

const SCOPE: ParamScope = ParamScope::Only(ParamGroup::NormalizationAffine);
const PROB_EMA: f64 = 0.9;

/// Entropy minimization restricted to reliable, non-redundant samples with a
/// Fisher-weighted anchor to the source parameters.
#[derive(Debug, Clone)]
pub struct Eata {
    model: AdaptableModel,
    source: ModelState,
    anchor: Vec<Vec<f64>>,
    fisher: FisherWeights,
    hp: HyperparamConfig,
    prob_ema: Option<Vec<f64>>,
}

impl Eata {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig, fisher: FisherWeights) -> Result<Self> {
        require_norm_affine(MethodKind::Eata, &model)?;
        if !fisher.is_valid_for(&model) {
            return Err(Error::MethodPrecondition {
                method: "eata".into(),
                reason: "Fisher weights do not match the model parameters".into(),
            });
        }
        model.set_norm_mode(NormMode::UseBatch);
        model.clear_optimizer_slots();
        let source = model.snapshot();
        let anchor = model.params().iter().map(|p| p.value.clone()).collect();
        Ok(Eata {
            model,
            source,
            anchor,
            fisher,
            hp,
            prob_ema: None,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.hp.entropy_factor * (self.model.num_classes() as f64).ln()
    }

    /// Per-sample weights: zero for unreliable or redundant samples,
    /// `exp(threshold - H)` otherwise.
    pub fn sample_weights(&self, probs: &Array2<f64>, ent: &[f64]) -> Vec<f64> {
        let thr = self.threshold();
        ent.iter()
            .enumerate()
            .map(|(i, &h)| {
                if h >= thr {
                    return 0.0;
                }
                if let Some(ema) = &self.prob_ema {
                    let p = probs.row(i);
                    let dot: f64 = p.iter().zip(ema).map(|(a, b)| a * b).sum();
                    let na = p.dot(&p).sqrt();
                    let nb = ema.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if dot / (na * nb).max(1e-12) > self.hp.redundancy_threshold {
                        return 0.0;
                    }
                }
                (thr - h).exp()
            })
            .collect()
    }

    /// `β Σ F (θ - θ_S)²` over normalization-affine parameters.
    pub fn fisher_penalty(&self) -> f64 {
        let mut total = 0.0;
        for (i, p) in self.model.params().iter().enumerate() {
            if p.group != ParamGroup::NormalizationAffine {
                continue;
            }
            for ((v, a), f) in p.value.iter().zip(&self.anchor[i]).zip(&self.fisher.values[i]) {
                total += f * (v - a).powi(2);
            }
        }
        self.hp.fisher_weight * total
    }

    fn add_penalty_grad(&self, grads: &mut Grads) {
        for (i, p) in self.model.params().iter().enumerate() {
            if p.group != ParamGroup::NormalizationAffine {
                continue;
            }
            for (j, g) in grads.0[i].iter_mut().enumerate() {
                *g += 2.0 * self.hp.fisher_weight * self.fisher.values[i][j] * (p.value[j] - self.anchor[i][j]);
            }
        }
    }
}

impl TtaMethod for Eata {
    fn kind(&self) -> MethodKind {
        MethodKind::Eata
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let fwd = self.model.forward(batch.samples())?;
        let probs = softmax_rows(&fwd.logits);
        let ent = entropies(&fwd.logits);
        let weights = self.sample_weights(&probs, &ent);
        let active = weights.iter().filter(|w| **w > 0.0).count();
        let (ent_loss, d_logits) = weighted_entropy(&fwd.logits, &weights, active.max(1) as f64);
        let loss = ent_loss + self.fisher_penalty();
        let mut grads = self.model.backward(&fwd.tape, &d_logits, None, SCOPE);
        self.add_penalty_grad(&mut grads);
        self.model.sgd_step(&grads, self.hp.lr, self.hp.momentum, SCOPE);
        self.model.commit_running_stats(&fwd.tape);

        if active > 0 {
            let c = probs.ncols();
            let mut mean = vec![0.0; c];
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    for k in 0..c {
                        mean[k] += probs[[i, k]] / active as f64;
                    }
                }
            }
            self.prob_ema = Some(match self.prob_ema.take() {
                None => mean,
                Some(e) => e.iter().zip(&mean).map(|(a, b)| PROB_EMA * a + (1.0 - PROB_EMA) * b).collect(),
            });
        }
        Ok(StepOutput {
            probs,
            loss: Some(loss),
            reset: false,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.model
    }

    fn reset(&mut self) {
        self.model.restore(&self.source).expect("source state matches model");
        self.prob_ema = None;
    }

    fn digest(&self) -> [u8; 32] {
        let ema = self.prob_ema.as_deref().map(f64_bytes).unwrap_or_default();
        digest_parts(&[&self.model.state_hash(), &[self.prob_ema.is_some() as u8], &ema])
    }
}
