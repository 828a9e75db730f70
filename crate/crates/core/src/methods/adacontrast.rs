use std::collections::VecDeque;

use ndarray::Array2;

use super::losses::{cross_entropy, info_nce, marginal_entropy};
use super::{digest_parts, f64_bytes, HyperparamConfig, MethodKind, StepOutput, TtaMethod, TEACHER_EMA};
use crate::augment::AugmentationPipeline;
use crate::batch::Batch;
use crate::error::Result;
use crate::model::{AdaptableModel, ModelState, NormMode, ParamScope};
use crate::prob::{argmax, l2_normalize, softmax_rows};
use crate::rng::derive_seed;

pub const CONTRAST_TEMPERATURE: f64 = 0.07;
pub const VOTE_NEIGHBORS: usize = 3;

/// One memory entry: a unit feature from the momentum encoder and the
/// probabilities that accompany it.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Pseudo-label for each query: argmax of the mean probabilities of its
/// `VOTE_NEIGHBORS` most cosine-similar memory entries, or of `fallback`
/// while the memory holds fewer entries than that.
pub fn soft_vote(queries: &Array2<f64>, memory: &VecDeque<MemoryEntry>, fallback: &Array2<f64>) -> Vec<usize> {
    (0..queries.nrows())
        .map(|i| {
            if memory.len() < VOTE_NEIGHBORS {
                return argmax(fallback.row(i).as_slice().expect("contiguous"));
            }
            let q = l2_normalize(queries.row(i)).unwrap_or_else(|| vec![0.0; queries.ncols()]);
            let mut sims: Vec<(f64, usize)> = memory
                .iter()
                .enumerate()
                .map(|(j, e)| (q.iter().zip(&e.feature).map(|(a, b)| a * b).sum(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let c = memory[0].probs.len();
            let mut vote = vec![0.0; c];
            for &(_, j) in sims.iter().take(VOTE_NEIGHBORS) {
                for (v, p) in vote.iter_mut().zip(&memory[j].probs) {
                    *v += p;
                }
            }
            argmax(&vote)
        })
        .collect()
}

/// Contrastive self-training with a momentum encoder and a feature memory:
/// neighbor-voted pseudo-labels, InfoNCE between strong views and a
/// diversity term.
#[derive(Debug, Clone)]
pub struct AdaContrast {
    student: AdaptableModel,
    momentum: AdaptableModel,
    source: ModelState,
    hp: HyperparamConfig,
    memory: VecDeque<MemoryEntry>,
    weak: AugmentationPipeline,
    strong: AugmentationPipeline,
    seed: u64,
    steps: u64,
}

impl AdaContrast {
    pub fn new(mut model: AdaptableModel, hp: HyperparamConfig, seed: u64) -> Self {
        model.set_norm_mode(NormMode::UseRunning);
        model.clear_optimizer_slots();
        let source = model.snapshot();
        AdaContrast {
            momentum: model.clone(),
            student: model,
            source,
            hp,
            memory: VecDeque::new(),
            weak: AugmentationPipeline::weak(),
            strong: AugmentationPipeline::strong(),
            seed,
            steps: 0,
        }
    }

    pub fn memory(&self) -> &VecDeque<MemoryEntry> {
        &self.memory
    }

    fn view_seed(&self, view: &str) -> u64 {
        derive_seed(self.seed, &["adacontrast", &self.steps.to_string(), view])
    }
}

impl TtaMethod for AdaContrast {
    fn kind(&self) -> MethodKind {
        MethodKind::AdaContrast
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let x = batch.samples();
        let clean = self.student.forward(x)?;
        let probs = softmax_rows(&clean.logits);

        let xw = self.weak.apply_batch(x, self.view_seed("weak"))?;
        let xs1 = self.strong.apply_batch(x, self.view_seed("strong-1"))?;
        let xs2 = self.strong.apply_batch(x, self.view_seed("strong-2"))?;

        let weak_student = self.student.forward(&xw)?;
        let pseudo = soft_vote(&weak_student.features, &self.memory, &softmax_rows(&weak_student.logits));

        let s1 = self.student.forward(&xs1)?;
        let keys = self.momentum.forward(&xs2)?.features;
        let negatives: Vec<Vec<f64>> = self.memory.iter().map(|e| e.feature.clone()).collect();

        let (ce, mut d_logits) = cross_entropy(&s1.logits, &pseudo);
        let (ctr, d_features) = info_nce(&s1.features, &keys, &negatives, CONTRAST_TEMPERATURE);
        let (div, d_div) = marginal_entropy(&s1.logits);
        d_logits -= &d_div;
        let loss = ce + ctr - div;

        let grads = self.student.backward(&s1.tape, &d_logits, Some(&d_features), ParamScope::All);
        self.student.sgd_step(&grads, self.hp.lr, self.hp.momentum, ParamScope::All);
        self.momentum.ema_towards(&self.student, TEACHER_EMA);

        let weak_momentum = self.momentum.forward(&xw)?;
        let mprobs = softmax_rows(&weak_momentum.logits);
        for i in 0..x.shape()[0] {
            if let Some(feature) = l2_normalize(weak_momentum.features.row(i)) {
                self.memory.push_back(MemoryEntry {
                    feature,
                    probs: mprobs.row(i).to_vec(),
                });
            }
        }
        while self.memory.len() > self.hp.queue_size {
            self.memory.pop_front();
        }
        self.steps += 1;
        Ok(StepOutput {
            probs,
            loss: Some(loss),
            reset: false,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.student
    }

    fn reset(&mut self) {
        self.student.restore(&self.source).expect("source state matches model");
        self.momentum.restore(&self.source).expect("source state matches model");
        self.memory.clear();
        self.steps = 0;
    }

    fn digest(&self) -> [u8; 32] {
        let mem: Vec<u8> = self
            .memory
            .iter()
            .flat_map(|e| f64_bytes(&e.feature).into_iter().chain(f64_bytes(&e.probs)))
            .collect();
        digest_parts(&[
            &self.student.state_hash(),
            &self.momentum.state_hash(),
            &mem,
            &self.steps.to_le_bytes(),
        ])
    }
}
