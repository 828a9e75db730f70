//! Test-time adaptation methods. Each method owns a model (or a
//! student/teacher pair) and adapts it one batch at a time.

mod adacontrast;
mod config;
mod eata;
mod fisher;
mod lame;
pub mod losses;
mod memo;
mod rmt;
mod sar;
mod tent;

pub use adacontrast::AdaContrast;
pub use config::{config_grid, BaseGrid, HyperparamConfig, MethodSearch};
pub use eata::Eata;
pub use fisher::{compute_prototypes, estimate_fisher, FisherWeights, SourcePrototypes};
pub use lame::{knn_affinity, lame_adjust, lame_objective, Lame, LameSolution};
pub use memo::Memo;
pub use rmt::RmtSf;
pub use sar::Sar;
pub use tent::Tent;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::AdaptableModel;

/// SAM neighborhood radius.
pub const SAM_RHO: f64 = 0.05;
/// EMA rate of teacher / momentum-encoder parameters.
pub const TEACHER_EMA: f64 = 0.999;
/// EMA rate of SAR's loss tracker.
pub const SAR_LOSS_EMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "tent")]
    Tent,
    #[serde(rename = "eata")]
    Eata,
    #[serde(rename = "sar")]
    Sar,
    #[serde(rename = "adacontrast")]
    AdaContrast,
    #[serde(rename = "memo")]
    Memo,
    #[serde(rename = "lame")]
    Lame,
    #[serde(rename = "rmt-sf")]
    RmtSf,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Tent,
        MethodKind::Eata,
        MethodKind::Sar,
        MethodKind::AdaContrast,
        MethodKind::Memo,
        MethodKind::Lame,
        MethodKind::RmtSf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Tent => "tent",
            MethodKind::Eata => "eata",
            MethodKind::Sar => "sar",
            MethodKind::AdaContrast => "adacontrast",
            MethodKind::Memo => "memo",
            MethodKind::Lame => "lame",
            MethodKind::RmtSf => "rmt-sf",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Hyperparameter names this method reads, beyond nothing at all for
    /// LAME.
    pub fn config_schema(self) -> &'static [&'static str] {
        match self {
            MethodKind::Tent => &["lr", "momentum"],
            MethodKind::Eata => &["lr", "momentum", "entropy_factor", "redundancy_threshold", "fisher_weight"],
            MethodKind::Sar => &["lr", "momentum", "entropy_factor", "reset_threshold"],
            MethodKind::AdaContrast => &["lr", "momentum", "queue_size"],
            MethodKind::Memo => &["lr", "momentum", "memo_augs"],
            MethodKind::Lame => &["lame_k"],
            MethodKind::RmtSf => &["lr", "momentum", "use_prototypes"],
        }
    }

    pub fn requires_fisher(self) -> bool {
        self == MethodKind::Eata
    }

    pub fn requires_prototypes(self) -> bool {
        self == MethodKind::RmtSf
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a method reports after consuming one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Output probabilities used for prediction (B×C).
    pub probs: Array2<f64>,
    /// Adaptation loss, when the method minimized one this step.
    pub loss: Option<f64>,
    /// True when the method reset itself to the source state.
    pub reset: bool,
}

impl StepOutput {
    pub fn predictions(&self) -> Vec<usize> {
        crate::prob::argmax_rows(&self.probs)
    }
}

/// A per-batch online adaptation procedure.
pub trait TtaMethod: Send {
    fn kind(&self) -> MethodKind;

    /// Consume one batch. Labels inside `batch` are not readable here.
    fn step(&mut self, batch: &Batch) -> Result<StepOutput>;

    /// The model whose outputs are deployed; surrogate metrics are computed
    /// on it.
    fn deployed_model(&self) -> &AdaptableModel;

    /// Return every piece of touched state to its initial value.
    fn reset(&mut self);

    /// Hash of all state the method mutates.
    fn digest(&self) -> [u8; 32];
}

/// Source-side resources some methods need.
#[derive(Debug, Clone, Default)]
pub struct MethodResources {
    pub fisher: Option<FisherWeights>,
    pub prototypes: Option<SourcePrototypes>,
}

/// Construct a method by kind around a copy of the source model.
pub fn build_method(
    kind: MethodKind,
    source: &AdaptableModel,
    hp: &HyperparamConfig,
    resources: &MethodResources,
    seed: u64,
) -> Result<Box<dyn TtaMethod>> {
    let model = source.clone();
    Ok(match kind {
        MethodKind::Tent => Box::new(Tent::new(model, hp.clone())?),
        MethodKind::Eata => {
            let fisher = resources.fisher.clone().ok_or_else(|| Error::MethodPrecondition {
                method: kind.name().into(),
                reason: "Fisher weights were not estimated".into(),
            })?;
            Box::new(Eata::new(model, hp.clone(), fisher)?)
        }
        MethodKind::Sar => Box::new(Sar::new(model, hp.clone())?),
        MethodKind::AdaContrast => Box::new(AdaContrast::new(model, hp.clone(), seed)),
        MethodKind::Memo => Box::new(Memo::new(model, hp.clone(), seed)),
        MethodKind::Lame => Box::new(Lame::new(model, hp.lame_k)),
        MethodKind::RmtSf => {
            let protos = if hp.use_prototypes {
                resources.prototypes.clone()
            } else {
                None
            };
            Box::new(RmtSf::new(model, hp.clone(), protos, seed))
        }
    })
}

pub(crate) fn digest_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn require_norm_affine(kind: MethodKind, model: &AdaptableModel) -> Result<()> {
    if model.has_group(crate::model::ParamGroup::NormalizationAffine) {
        Ok(())
    } else {
        Err(Error::MethodPrecondition {
            method: kind.name().into(),
            reason: "model has no normalization-affine parameters".into(),
        })
    }
}
