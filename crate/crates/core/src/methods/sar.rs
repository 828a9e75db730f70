use super::losses::{entropies, weighted_entropy};
use super::{digest_parts, require_norm_affine, HyperparamConfig, MethodKind, StepOutput, TtaMethod, SAM_RHO, SAR_LOSS_EMA};
use crate::batch::Batch;
use crate::error::Result;
use crate::model::{AdaptableModel, ModelState, NormMode, ParamGroup, ParamScope};
use crate::prob::softmax_rows;

const SCOPE: ParamScope = ParamScope::Only(ParamGroup::NormalizationAffine);

/// Reliable-sample entropy minimization with a sharpness-aware update and
/// a reset to the source state when the smoothed loss collapses.
#[derive(Debug, Clone)]
pub struct Sar {
    model: AdaptableModel,
    source: ModelState,
    hp: HyperparamConfig,
    rho: f64,
    loss_ema: Option<f64>,
}

fn mask(ent: &[f64], thr: f64, keep: Option<&[f64]>) -> Vec<f64> {
    ent.iter()
        .enumerate()
        .map(|(i, &h)| {
            let prior = keep.map_or(true, |k| k[i] > 0.0);
            if prior && h < thr {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

impl Sar {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig) -> Result<Self> {
        require_norm_affine(MethodKind::Sar, &model)?;
        model.set_norm_mode(NormMode::UseBatch);
        model.clear_optimizer_slots();
        let source = model.snapshot();
        Ok(Sar {
            model,
            source,
            hp,
            rho: SAM_RHO,
            loss_ema: None,
        })
    }

    /// Override the SAM radius.
    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn threshold(&self) -> f64 {
        self.hp.entropy_factor * (self.model.num_classes() as f64).ln()
    }

    pub fn loss_ema(&self) -> Option<f64> {
        self.loss_ema
    }
}

impl TtaMethod for Sar {
    fn kind(&self) -> MethodKind {
        MethodKind::Sar
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let thr = self.threshold();
        let fwd = self.model.forward(batch.samples())?;
        let probs = softmax_rows(&fwd.logits);
        let keep = mask(&entropies(&fwd.logits), thr, None);
        let n1 = keep.iter().filter(|w| **w > 0.0).count();
        if n1 == 0 {
            self.model.commit_running_stats(&fwd.tape);
            return Ok(StepOutput {
                probs,
                loss: None,
                reset: false,
            });
        }
        let (_, d1) = weighted_entropy(&fwd.logits, &keep, n1 as f64);
        let g1 = self.model.backward(&fwd.tape, &d1, None, SCOPE);
        let origin: Vec<Vec<f64>> = self.model.params().iter().map(|p| p.value.clone()).collect();
        let gnorm = g1.norm();
        if gnorm > 0.0 {
            self.model.perturb(&g1, self.rho / gnorm, SCOPE);
        }
        let fwd2 = self.model.forward(batch.samples())?;
        let keep2 = mask(&entropies(&fwd2.logits), thr, Some(&keep));
        let n2 = keep2.iter().filter(|w| **w > 0.0).count();
        let second = if n2 > 0 {
            let (loss2, d2) = weighted_entropy(&fwd2.logits, &keep2, n2 as f64);
            Some((loss2, self.model.backward(&fwd2.tape, &d2, None, SCOPE)))
        } else {
            None
        };
        for (p, o) in self.model.params_mut().iter_mut().zip(origin) {
            p.value = o;
        }
        self.model.commit_running_stats(&fwd.tape);
        let Some((loss2, g2)) = second else {
            return Ok(StepOutput {
                probs,
                loss: None,
                reset: false,
            });
        };
        self.model.sgd_step(&g2, self.hp.lr, self.hp.momentum, SCOPE);
        if loss2.is_finite() {
            let ema = match self.loss_ema {
                None => loss2,
                Some(e) => SAR_LOSS_EMA * e + (1.0 - SAR_LOSS_EMA) * loss2,
            };
            self.loss_ema = Some(ema);
        }
        let reset = self.loss_ema.is_some_and(|e| e < self.hp.reset_threshold);
        if reset {
            self.reset();
        }
        Ok(StepOutput {
            probs,
            loss: Some(loss2),
            reset,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.model
    }

    fn reset(&mut self) {
        self.model.restore(&self.source).expect("source state matches model");
        self.loss_ema = None;
    }

    fn digest(&self) -> [u8; 32] {
        let ema = self.loss_ema.map(f64::to_le_bytes).unwrap_or_default();
        digest_parts(&[&self.model.state_hash(), &[self.loss_ema.is_some() as u8], &ema])
    }
}
