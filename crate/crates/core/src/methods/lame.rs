use ndarray::Array2;

use super::{digest_parts, MethodKind, StepOutput, TtaMethod};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::{AdaptableModel, NormMode};
use crate::prob::{check_simplex, softmax_rows};

pub const LAME_MAX_ITERS: usize = 100;
pub const LAME_TOL: f64 = 1e-6;

/// Symmetrized binary k-nearest-neighbor affinity under cosine similarity;
/// a sample is never its own neighbor. Ties go to the lower index.
pub fn knn_affinity(features: &Array2<f64>, k: usize) -> Array2<f64> {
    let b = features.nrows();
    let mut w = Array2::zeros((b, b));
    if k == 0 || b < 2 {
        return w;
    }
    let norms: Vec<f64> = features.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    for i in 0..b {
        let mut sims: Vec<(f64, usize)> = (0..b)
            .filter(|&j| j != i)
            .map(|j| (features.row(i).dot(&features.row(j)) / (norms[i] * norms[j]), j))
            .collect();
        sims.sort_by(|a, c| c.0.total_cmp(&a.0).then(a.1.cmp(&c.1)));
        for &(_, j) in sims.iter().take(k) {
            w[[i, j]] = 1.0;
        }
    }
    let wt = w.t().to_owned();
    (w + wt) / 2.0
}

#[derive(Debug, Clone)]
pub struct LameSolution {
    pub assignments: Array2<f64>,
    pub iterations: usize,
    /// Objective after each iteration, starting with the initial point.
    pub objective: Vec<f64>,
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `Σ z·ln p + ½ Σ W_ij z_i·z_j - Σ z ln z`, maximized by the iteration.
pub fn lame_objective(probs: &Array2<f64>, w: &Array2<f64>, z: &Array2<f64>) -> f64 {
    let b = probs.nrows();
    let mut f = 0.0;
    for i in 0..b {
        for k in 0..probs.ncols() {
            f += xlogy(z[[i, k]], probs[[i, k]]) - xlogy(z[[i, k]], z[[i, k]]);
        }
        for j in 0..b {
            if w[[i, j]] != 0.0 {
                f += 0.5 * w[[i, j]] * z.row(i).dot(&z.row(j));
            }
        }
    }
    f
}

/// Fixed-point iteration `z_i ∝ p_i ⊙ exp(Σ_j W_ij z_j)`.
pub fn lame_adjust(probs: &Array2<f64>, w: &Array2<f64>) -> Result<LameSolution> {
    let b = probs.nrows();
    if w.dim() != (b, b) {
        return Err(Error::Shape(format!("affinity {:?} for {b} samples", w.dim())));
    }
    for r in probs.rows() {
        check_simplex(&r.to_vec())?;
    }
    let mut z = probs.clone();
    let mut objective = vec![lame_objective(probs, w, &z)];
    if w.iter().all(|&x| x == 0.0) {
        return Ok(LameSolution {
            assignments: z,
            iterations: 0,
            objective,
        });
    }
    let c = probs.ncols();
    let mut iterations = 0;
    while iterations < LAME_MAX_ITERS {
        let pull = w.dot(&z);
        let mut next = Array2::zeros((b, c));
        for i in 0..b {
            let max = (0..c)
                .filter(|&k| probs[[i, k]] > 0.0)
                .map(|k| pull[[i, k]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let v = probs[[i, k]] * (pull[[i, k]] - max).exp();
                next[[i, k]] = v;
                sum += v;
            }
            next.row_mut(i).mapv_inplace(|v| v / sum);
        }
        let delta = next.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = next;
        iterations += 1;
        objective.push(lame_objective(probs, w, &z));
        if delta < LAME_TOL {
            break;
        }
    }
    Ok(LameSolution {
        assignments: z,
        iterations,
        objective,
    })
}

/// Output-only adjustment; the model is never updated.
#[derive(Debug, Clone)]
pub struct Lame {
    model: AdaptableModel,
    k: usize,
}

impl Lame {
    pub fn new(mut model: AdaptableModel, k: usize) -> Self {
        model.set_norm_mode(NormMode::UseRunning);
        Lame { model, k }
    }
}

impl TtaMethod for Lame {
    fn kind(&self) -> MethodKind {
        MethodKind::Lame
    }

    fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let fwd = self.model.forward(batch.samples())?;
        let probs = softmax_rows(&fwd.logits);
        let w = knn_affinity(&fwd.features, self.k);
        let sol = lame_adjust(&probs, &w)?;
        Ok(StepOutput {
            probs: sol.assignments,
            loss: None,
            reset: false,
        })
    }

    fn deployed_model(&self) -> &AdaptableModel {
        &self.model
    }

    fn reset(&mut self) {}

    fn digest(&self) -> [u8; 32] {
        digest_parts(&[&self.model.state_hash()])
    }
}
