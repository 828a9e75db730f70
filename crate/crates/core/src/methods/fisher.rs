use ndarray::{s, Array2};

use super::losses::cross_entropy;
use crate::error::{Error, Result};
use crate::model::{AdaptableModel, Images, NormMode, ParamScope};
use crate::prob::l2_normalize;

/// Per-parameter importance, aligned with the model's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherWeights {
    pub values: Vec<Vec<f64>>,
}

impl FisherWeights {
    pub fn is_valid_for(&self, model: &AdaptableModel) -> bool {
        self.values.len() == model.params().len()
            && self
                .values
                .iter()
                .zip(model.params())
                .all(|(f, p)| f.len() == p.value.len() && f.iter().all(|x| x.is_finite() && *x >= 0.0))
    }
}

/// Unit-normalized class-mean features, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrototypes {
    pub vectors: Array2<f64>,
}

fn eval_copy(model: &AdaptableModel) -> AdaptableModel {
    let mut m = model.clone();
    m.set_norm_mode(NormMode::UseRunning);
    m
}

/// Diagonal empirical Fisher: mean over samples of the squared gradient of
/// each sample's cross-entropy.
pub fn estimate_fisher(model: &AdaptableModel, images: &Images, labels: &[usize]) -> Result<FisherWeights> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::invalid("Fisher estimation needs at least one sample"));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    let m = eval_copy(model);
    let mut acc: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for i in 0..n {
        let x = images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let fwd = m.forward(&x)?;
        let (_, d) = cross_entropy(&fwd.logits, &labels[i..i + 1]);
        let g = m.backward(&fwd.tape, &d, None, ParamScope::All);
        for (a, gi) in acc.iter_mut().zip(&g.0) {
            for (x, y) in a.iter_mut().zip(gi) {
                *x += y * y;
            }
        }
    }
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(FisherWeights { values: acc })
}

/// Class prototypes from a labeled source subset; every class must occur.
pub fn compute_prototypes(model: &AdaptableModel, images: &Images, labels: &[usize]) -> Result<SourcePrototypes> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    let c = model.num_classes();
    let d = model.feature_dim();
    let m = eval_copy(model);
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = images.slice(s![start..end, .., .., ..]).to_owned();
        let fwd = m.forward(&x)?;
        for (r, &y) in labels[start..end].iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
            }
            let mut row = sums.row_mut(y);
            row += &fwd.features.row(r);
            counts[y] += 1;
        }
        start = end;
    }
    let mut vectors = Array2::zeros((c, d));
    for k in 0..c {
        if counts[k] == 0 {
            return Err(Error::MissingClass(k));
        }
        let mean = sums.row(k).mapv(|v| v / counts[k] as f64);
        let unit = l2_normalize(mean.view()).ok_or_else(|| Error::invalid(format!("class {k} has a zero mean feature")))?;
        vectors.row_mut(k).assign(&ndarray::Array1::from(unit));
    }
    Ok(SourcePrototypes { vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerSpec};
    use ndarray::Array4;

    fn logistic() -> AdaptableModel {
        let arch = Architecture {
            input: [1, 1, 1],
            num_classes: 2,
            layers: vec![LayerSpec::Features, LayerSpec::Linear { out: 2 }],
        };
        AdaptableModel::new(arch, 3).unwrap()
    }

    #[test]
    fn fisher_matches_logistic_regression_gradients() {
        let model = logistic();
        let xs = [0.5, -1.5, 2.0];
        let ys = [1usize, 0, 1];
        let images = Array4::from_shape_vec((3, 1, 1, 1), xs.to_vec()).unwrap();
        let f = estimate_fisher(&model, &images, &ys).unwrap();
        // parameters: weight [2x1], bias [2]
        let w = &model.params()[0].value;
        let b = &model.params()[1].value;
        let mut expect_w = [0.0; 2];
        let mut expect_b = [0.0; 2];
        for (&x, &y) in xs.iter().zip(&ys) {
            let z0 = w[0] * x + b[0];
            let z1 = w[1] * x + b[1];
            let p1 = 1.0 / (1.0 + (z0 - z1).exp());
            let p = [1.0 - p1, p1];
            for k in 0..2 {
                let r = p[k] - if k == y { 1.0 } else { 0.0 };
                expect_w[k] += (r * x).powi(2) / 3.0;
                expect_b[k] += r.powi(2) / 3.0;
            }
        }
        for k in 0..2 {
            assert!((f.values[0][k] - expect_w[k]).abs() < 1e-12);
            assert!((f.values[1][k] - expect_b[k]).abs() < 1e-12);
        }
        assert!(f.is_valid_for(&model));
    }

    #[test]
    fn fisher_invariant_to_duplication_and_rejects_empty() {
        let model = logistic();
        let one = Array4::from_shape_vec((2, 1, 1, 1), vec![0.3, -0.7]).unwrap();
        let two = Array4::from_shape_vec((4, 1, 1, 1), vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let a = estimate_fisher(&model, &one, &[0, 1]).unwrap();
        let b = estimate_fisher(&model, &two, &[0, 1, 0, 1]).unwrap();
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        let empty = Array4::zeros((0, 1, 1, 1));
        assert!(estimate_fisher(&model, &empty, &[]).is_err());
    }

    #[test]
    fn prototypes_are_normalized_means() {
        let model = AdaptableModel::new(Architecture::mlp(3, 4, 2), 1).unwrap();
        let images = Array4::from_shape_vec((3, 3, 1, 1), vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.5, 0.2, 0.2, 0.2]).unwrap();
        let labels = [0, 1, 0];
        let p = compute_prototypes(&model, &images, &labels).unwrap();
        let fwd = eval_copy(&model).forward(&images).unwrap();
        let mean = (&fwd.features.row(0) + &fwd.features.row(2)) / 2.0;
        let n = mean.dot(&mean).sqrt();
        for j in 0..model.feature_dim() {
            assert!((p.vectors[[0, j]] - mean[j] / n).abs() < 1e-12);
        }
        let dup = ndarray::concatenate![ndarray::Axis(0), images, images];
        let q = compute_prototypes(&model, &dup, &[0, 1, 0, 0, 1, 0]).unwrap();
        for (a, b) in p.vectors.iter().zip(q.vectors.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        match compute_prototypes(&model, &images, &[0, 0, 0]) {
            Err(Error::MissingClass(1)) => {}
            other => panic!("expected missing class, got {other:?}"),
        }
    }
}
