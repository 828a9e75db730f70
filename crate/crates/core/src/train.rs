//! Supervised pretraining of the source model and plain evaluation helpers.

use ndarray::s;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::methods::losses::cross_entropy;
use crate::model::{AdaptableModel, Architecture, Images, NormMode, ParamScope};
use crate::prob::argmax_rows;
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 12,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Plan("training epochs and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Plan("training lr must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Train a fresh model on `train` with mini-batch SGD on cross-entropy.
/// The returned model uses running statistics.
pub fn pretrain(arch: &Architecture, train: &Domain, settings: &TrainSettings) -> Result<AdaptableModel> {
    settings.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = AdaptableModel::new(arch.clone(), settings.seed)?;
    model.set_norm_mode(NormMode::UseBatch);
    let mut rng = derived_rng(settings.seed, &["pretrain-order"]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        // cosine decay over epochs
        let lr = settings.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / settings.epochs as f64).cos());
        for chunk in order.chunks(settings.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train.gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let fwd = model.forward(&x)?;
            let (loss, d) = cross_entropy(&fwd.logits, &y);
            if !loss.is_finite() {
                return Err(Error::invalid(format!("pretraining diverged in epoch {epoch}")));
            }
            let g = model.backward(&fwd.tape, &d, None, ParamScope::All);
            model.sgd_step(&g, lr, settings.momentum, ParamScope::All);
            model.commit_running_stats(&fwd.tape);
        }
    }
    model.clear_optimizer_slots();
    model.set_norm_mode(NormMode::UseRunning);
    Ok(model)
}

/// Predictions in chunks, with the model's current normalization mode.
pub fn predict(model: &AdaptableModel, images: &Images) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let fwd = model.forward(&images.slice(s![start..end, .., .., ..]).to_owned())?;
        out.extend(argmax_rows(&fwd.logits));
        start = end;
    }
    Ok(out)
}

/// Accuracy using stored running statistics, regardless of the model's mode.
pub fn evaluate(model: &AdaptableModel, domain: &Domain) -> Result<f64> {
    if domain.is_empty() {
        return Err(Error::invalid(format!("domain {} is empty", domain.name)));
    }
    let mut m = model.clone();
    m.set_norm_mode(NormMode::UseRunning);
    let pred = predict(&m, &domain.images)?;
    crate::metrics::accuracy(&pred, &domain.labels)
}
