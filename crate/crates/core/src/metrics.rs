//! Quantities accumulated during adaptation: unsupervised surrogates
//! (entropy, consistency, soft neighborhood density) and accuracies.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPipeline;
use crate::error::{Error, Result};
use crate::model::{AdaptableModel, Images};
use crate::prob::{check_simplex, l2_normalize, softmax_rows};

/// Soft neighborhood density temperature.
pub const SND_TEMPERATURE: f64 = 0.05;

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean per-row entropy of a B×C probability matrix.
pub fn mean_entropy(probs: &Array2<f64>) -> f64 {
    let b = probs.nrows();
    if b == 0 {
        return 0.0;
    }
    probs
        .axis_iter(Axis(0))
        .map(|r| entropy_unchecked(r.as_slice().expect("standard layout")))
        .sum::<f64>()
        / b as f64
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// `½ (KL(p‖q) + KL(q‖p))`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    check_simplex(q)?;
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} classes", p.len(), q.len())));
    }
    // Clamp tiny negative rounding.
    Ok((0.5 * (kl(p, q) + kl(q, p))).max(0.0))
}

/// Mean symmetric KL between predictions on `images` and on one augmented
/// view of each sample. Lower is better. The model is not modified.
pub fn consistency_score(
    model: &AdaptableModel,
    images: &Images,
    pipeline: &AugmentationPipeline,
    seed: u64,
) -> Result<f64> {
    if pipeline.is_identity() {
        return Ok(0.0);
    }
    let clean = softmax_rows(&model.forward(images)?.logits);
    let augmented = pipeline.apply_batch(images, seed)?;
    let perturbed = softmax_rows(&model.forward(&augmented)?.logits);
    Ok(mean_symmetric_kl(&clean, &perturbed))
}

pub(crate) fn mean_symmetric_kl(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let b = p.nrows();
    p.axis_iter(Axis(0))
        .zip(q.axis_iter(Axis(0)))
        .map(|(a, c)| {
            let a = a.as_slice().expect("standard layout");
            let c = c.as_slice().expect("standard layout");
            (0.5 * (kl(a, c) + kl(c, a))).max(0.0)
        })
        .sum::<f64>()
        / b as f64
}

/// Soft neighborhood density: mean entropy of the row-wise softmax of
/// pairwise cosine similarities divided by `temperature`, self-pairs
/// excluded. Higher is better.
pub fn snd_score(features: &Array2<f64>, temperature: f64) -> Result<f64> {
    let b = features.nrows();
    if b < 2 {
        return Err(Error::invalid(format!("SND needs at least 2 samples, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("SND temperature must be positive"));
    }
    let rows = features
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, r)| l2_normalize(r).ok_or_else(|| Error::invalid(format!("feature row {i} has zero norm"))))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(b - 1);
    for i in 0..b {
        logits.clear();
        for j in 0..b {
            if i != j {
                let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, c)| a * c).sum();
                logits.push(s / temperature);
            }
        }
        crate::prob::softmax_in_place(&mut logits);
        total += entropy_unchecked(&logits);
    }
    Ok(total / b as f64)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Entropy,
    Consistency,
    Snd,
    Accuracy,
    ProbeAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Entropy,
        Metric::Consistency,
        Metric::Snd,
        Metric::Accuracy,
        Metric::ProbeAccuracy,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Consistency => "consistency",
            Metric::Snd => "snd",
            Metric::Accuracy => "accuracy",
            Metric::ProbeAccuracy => "probe-accuracy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample-weighted running means: `Σ value·n / Σ n` per metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    sums: [CompensatedSum; 5],
    counts: [usize; 5],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a per-sample mean `value` over `count` samples.
    pub fn add(&mut self, metric: Metric, value: f64, count: usize) {
        if count == 0 {
            return;
        }
        self.sums[metric.index()].add(value * count as f64);
        self.counts[metric.index()] += count;
    }

    /// Accumulated mean, or `None` when nothing was recorded.
    pub fn value(&self, metric: Metric) -> Option<f64> {
        let n = self.counts[metric.index()];
        (n > 0).then(|| self.sums[metric.index()].value() / n as f64)
    }

    pub fn count(&self, metric: Metric) -> usize {
        self.counts[metric.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let u = vec![0.01; 100];
        assert_abs_diff_eq!(shannon_entropy(&u).unwrap(), 100f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(shannon_entropy(&[0.5, 0.25, 0.25]).unwrap(), 1.0397207708399179, epsilon = 1e-12);
        assert!(shannon_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn symmetric_kl_examples() {
        // ½(0.9 ln(0.9/0.6) + 0.1 ln(0.1/0.4) + 0.6 ln(0.6/0.9) + 0.4 ln(0.4/0.1))
        assert_abs_diff_eq!(symmetric_kl(&[0.9, 0.1], &[0.6, 0.4]).unwrap(), 0.2687639203842082, epsilon = 1e-12);
        assert_eq!(symmetric_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn snd_edge_cases() {
        let two = array![[1.0, 0.0], [0.3, 0.2]];
        assert_eq!(snd_score(&two, 0.05).unwrap(), 0.0);
        let ortho = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.5]];
        assert_abs_diff_eq!(snd_score(&ortho, 0.05).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(snd_score(&array![[1.0, 0.0]], 0.05).is_err());
        assert!(snd_score(&array![[1.0, 0.0], [0.0, 0.0]], 0.05).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn accumulator_weights_by_batch_size() {
        let mut acc = MetricAccumulator::new();
        assert_eq!(acc.value(Metric::Entropy), None);
        acc.add(Metric::Entropy, 1.0, 10);
        acc.add(Metric::Entropy, 4.0, 5);
        assert_abs_diff_eq!(acc.value(Metric::Entropy).unwrap(), 2.0, epsilon = 1e-15);
        assert_eq!(acc.count(Metric::Entropy), 15);
    }

    #[test]
    fn compensated_sum_is_order_insensitive() {
        let xs = [1e16, 1.0, -1e16, 3.0, 1e-3];
        let mut a = CompensatedSum::default();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = CompensatedSum::default();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert_abs_diff_eq!(a.value(), b.value(), epsilon = 1e-9);
        assert_abs_diff_eq!(a.value(), 4.001, epsilon = 1e-9);
    }
}
