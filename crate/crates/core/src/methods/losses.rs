//! Differentiable losses. Each returns the scalar loss together with its
//! gradient with respect to the logits and/or features it was given.

use ndarray::{Array2, Axis};

use crate::prob::{log_softmax_rows, softmax_rows};

/// Per-sample Shannon entropies of `softmax(logits)`.
pub fn entropies(logits: &Array2<f64>) -> Vec<f64> {
    let logp = log_softmax_rows(logits);
    logp.axis_iter(Axis(0))
        .map(|r| -r.iter().map(|&l| l.exp() * l).sum::<f64>())
        .collect()
}

/// `Σ_i w_i H_i / denom` and its logit gradient. Weights are treated as
/// constants.
pub fn weighted_entropy(logits: &Array2<f64>, weights: &[f64], denom: f64) -> (f64, Array2<f64>) {
    let logp = log_softmax_rows(logits);
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, row) in logp.axis_iter(Axis(0)).enumerate() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let h = -row.iter().map(|&l| l.exp() * l).sum::<f64>();
        loss += w * h;
        for (k, &l) in row.iter().enumerate() {
            // dH/dz_k = -p_k (log p_k + H)
            grad[[i, k]] = -w * l.exp() * (l + h) / denom;
        }
    }
    (loss / denom, grad)
}

/// Mean entropy over all rows.
pub fn mean_entropy_loss(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    weighted_entropy(logits, &vec![1.0; b], b as f64)
}

/// Mean cross-entropy against hard labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / b);
    (loss / b, grad)
}

/// Entropy of the mean softmax over the rows, `H(mean_v softmax(z_v))`.
/// Used on augmented views of one sample and, negated, as a batch
/// diversity term.
pub fn marginal_entropy(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let v = logits.nrows() as f64;
    let p = softmax_rows(logits);
    let mean = p.mean_axis(Axis(0)).expect("non-empty");
    let h = -mean.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    // dH/dmean_k = -(ln mean_k + 1); the constant cancels under the
    // softmax Jacobian.
    let g: Vec<f64> = mean.iter().map(|&m| -m.max(f64::MIN_POSITIVE).ln()).collect();
    let mut grad = Array2::zeros(logits.dim());
    for (i, row) in p.axis_iter(Axis(0)).enumerate() {
        let dot: f64 = row.iter().zip(&g).map(|(a, b)| a * b).sum();
        for (k, &pk) in row.iter().enumerate() {
            grad[[i, k]] = pk * (g[k] - dot) / v;
        }
    }
    (h, grad)
}

/// Symmetric cross-entropy between student logits and fixed teacher
/// logits, `½[CE(p_t, p_s) + CE(p_s, p_t)]` averaged over rows, with the
/// gradient taken through the student only.
pub fn symmetric_cross_entropy(student: &Array2<f64>, teacher: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = student.nrows() as f64;
    let ls = log_softmax_rows(student);
    let lt = log_softmax_rows(teacher);
    let mut grad = Array2::zeros(student.dim());
    let mut loss = 0.0;
    for i in 0..student.nrows() {
        let c = student.ncols();
        let mut cross_st = 0.0; // Σ p_s log p_t
        for k in 0..c {
            let ps = ls[[i, k]].exp();
            let pt = lt[[i, k]].exp();
            loss += -0.5 * pt * ls[[i, k]] - 0.5 * ps * lt[[i, k]];
            cross_st += ps * lt[[i, k]];
        }
        for k in 0..c {
            let ps = ls[[i, k]].exp();
            let pt = lt[[i, k]].exp();
            grad[[i, k]] = (0.5 * (ps - pt) - 0.5 * ps * (lt[[i, k]] - cross_st)) / b;
        }
    }
    (loss / b, grad)
}

fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut r in out.axis_iter_mut(Axis(0)) {
        let n = r.dot(&r).sqrt().max(1e-12);
        r.mapv_inplace(|x| x / n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient with respect to an unnormalized vector `f` of a function of
/// `q = f / |f|`, given the gradient `g` with respect to `q`.
fn through_normalization(g: &[f64], q: &[f64], norm: f64) -> Vec<f64> {
    let gq: f64 = g.iter().zip(q).map(|(a, b)| a * b).sum();
    g.iter().zip(q).map(|(gi, qi)| (gi - gq * qi) / norm).collect()
}

/// InfoNCE: each normalized query must pick its own key (normalized,
/// treated as constant) among the negatives. Returns the mean loss and the
/// gradient with respect to the unnormalized query features.
pub fn info_nce(queries: &Array2<f64>, keys: &Array2<f64>, negatives: &[Vec<f64>], temperature: f64) -> (f64, Array2<f64>) {
    let b = queries.nrows();
    let (q, qn) = normalize_rows(queries);
    let (k, _) = normalize_rows(keys);
    let mut grad = Array2::zeros(queries.dim());
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    for i in 0..b {
        let qi = q.row(i);
        logits.clear();
        logits.push(qi.dot(&k.row(i)) / temperature);
        for n in negatives {
            logits.push(qi.iter().zip(n).map(|(a, c)| a * c).sum::<f64>() / temperature);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[0];
        let s: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let d = queries.ncols();
        let mut gq = vec![0.0; d];
        for j in 0..d {
            let mut acc = (s[0] - 1.0) * k[[i, j]];
            for (sn, n) in s[1..].iter().zip(negatives) {
                acc += sn * n[j];
            }
            gq[j] = acc / (temperature * b as f64);
        }
        let qv: Vec<f64> = qi.to_vec();
        for (j, g) in through_normalization(&gq, &qv, qn[i]).into_iter().enumerate() {
            grad[[i, j]] = g;
        }
    }
    (loss / b as f64, grad)
}

/// Mean cosine distance `1 - cos(f_i, proto_{y_i})` with unit prototypes.
pub fn prototype_distance(features: &Array2<f64>, prototypes: &Array2<f64>, assign: &[usize]) -> (f64, Array2<f64>) {
    let b = features.nrows() as f64;
    let (q, qn) = normalize_rows(features);
    let mut grad = Array2::zeros(features.dim());
    let mut loss = 0.0;
    for (i, &c) in assign.iter().enumerate() {
        let proto = prototypes.row(c);
        let cos = q.row(i).dot(&proto);
        loss += 1.0 - cos;
        let g: Vec<f64> = proto.iter().map(|p| -p / b).collect();
        let qv = q.row(i).to_vec();
        for (j, v) in through_normalization(&g, &qv, qn[i]).into_iter().enumerate() {
            grad[[i, j]] = v;
        }
    }
    (loss / b, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, grad: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-3), "idx {idx}: {num} vs {ana}");
        }
    }

    fn logits() -> Array2<f64> {
        array![[0.3, -1.2, 2.0, 0.1], [1.5, 0.2, -0.7, 0.0], [-0.4, 0.9, 0.3, 1.1]]
    }

    #[test]
    fn entropy_gradients() {
        let z = logits();
        let w = [1.3, 0.0, 0.7];
        let (_, g) = weighted_entropy(&z, &w, 2.0);
        fd_check(|x| weighted_entropy(x, &w, 2.0).0, &z, &g);
        let (_, g) = marginal_entropy(&z);
        fd_check(|x| marginal_entropy(x).0, &z, &g);
        let (_, g) = cross_entropy(&z, &[2, 0, 1]);
        fd_check(|x| cross_entropy(x, &[2, 0, 1]).0, &z, &g);
    }

    #[test]
    fn symmetric_ce_value_and_gradient() {
        let z = logits();
        let t = array![[0.0, 0.5, 1.0, -1.0], [2.0, 0.0, 0.0, 0.3], [0.1, 0.1, 0.1, 0.1]];
        let (_, g) = symmetric_cross_entropy(&z, &t);
        fd_check(|x| symmetric_cross_entropy(x, &t).0, &z, &g);
        // student == teacher: ½(H + H) = H per row
        let (v, _) = symmetric_cross_entropy(&z, &z);
        let h: f64 = entropies(&z).iter().sum::<f64>() / 3.0;
        assert!((v - h).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_gradients() {
        let f = array![[0.3, -1.2, 2.0], [1.5, 0.2, -0.7]];
        let keys = array![[1.0, 0.0, 0.5], [0.2, 0.2, -1.0]];
        let negs = vec![vec![0.6, 0.0, 0.8], vec![0.0, 1.0, 0.0], vec![-0.6, 0.8, 0.0]];
        let (_, g) = info_nce(&f, &keys, &negs, 0.07);
        fd_check(|x| info_nce(x, &keys, &negs, 0.07).0, &f, &g);
        let protos = array![[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let (_, g) = prototype_distance(&f, &protos, &[1, 0]);
        fd_check(|x| prototype_distance(x, &protos, &[1, 0]).0, &f, &g);
    }

    #[test]
    fn prototype_distance_zero_at_prototype() {
        let protos = array![[1.0, 0.0], [0.0, 1.0]];
        let f = array![[3.0, 0.0], [0.0, 0.5]];
        let (l, _) = prototype_distance(&f, &protos, &[0, 1]);
        assert_eq!(l, 0.0);
    }
}
