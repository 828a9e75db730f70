//! Probability utilities: numerically stable softmax and simplex-validated
//! probability vectors.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Tolerance for simplex membership of a [`ProbabilityVector`].
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A length-C vector of non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validate and wrap `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values)?;
        Ok(Self(values))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[index] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbabilityVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_simplex(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::NotSimplex("empty vector".into()));
    }
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NotSimplex(format!("entry {i} = {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Max-subtracted softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbabilityVector(out))
}

/// Unchecked softmax used on hot paths where logits are known finite.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a B×C logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let slice = row.as_slice_mut().expect("standard layout");
        softmax_in_place(slice);
    }
    out
}

/// Row-wise log-softmax of a B×C logit matrix.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect()
}

pub(crate) fn l2_normalize(v: ArrayView1<f64>) -> Option<Vec<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // e^x / sum e^x evaluated at 1, 2, 3 to five decimals.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn simplex_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
    }
}
