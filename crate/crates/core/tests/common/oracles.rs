#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng as _;
use ttasel::methods::losses::{
    cross_entropy, info_nce, marginal_entropy, mean_entropy_loss, prototype_distance, symmetric_cross_entropy,
    weighted_entropy,
};
use ttasel::methods::{knn_affinity, lame_adjust};
use ttasel::metrics::{shannon_entropy, snd_score, symmetric_kl};
use ttasel::model::Forward;
use ttasel::report::spearman;
use ttasel::{NormMode, ParamScope};

use super::*;
use super::invariants::Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const TOL: f64 = 1e-6;

fn row(p: &Array2<f64>, i: usize) -> Vec<f64> {
    p.row(i).to_vec()
}

pub fn entropy_and_kl() -> Check {
    let mut r = rng(21);
    for trial in 0..200 {
        let c = 2 + trial % 9;
        let p = random_simplex_rows(&mut r, 2, c);
        let (a, b) = (row(&p, 0), row(&p, 1));
        let mut h = 0.0;
        for &v in &a {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        let got = shannon_entropy(&a).map_err(|e| e.to_string())?;
        ensure!((got - h).abs() < TOL, "entropy {got} vs {h}");
        let mut kl = 0.0;
        for k in 0..c {
            kl += 0.5 * (a[k] * (a[k] / b[k]).ln() + b[k] * (b[k] / a[k]).ln());
        }
        let got = symmetric_kl(&a, &b).map_err(|e| e.to_string())?;
        ensure!((got - kl).abs() < TOL, "symmetric KL {got} vs {kl}");
    }
    Ok("200 random vectors each".into())
}

pub fn snd() -> Check {
    let mut r = rng(22);
    for trial in 0..100 {
        let b = 2 + trial % 9;
        let d = 1 + trial % 5;
        let f = uniform(&mut r, (b, d), 2.0);
        let t = [0.05, 0.1, 1.0][trial % 3];
        let mut unit = vec![vec![0.0; d]; b];
        for i in 0..b {
            let mut n = 0.0;
            for j in 0..d {
                n += f[[i, j]] * f[[i, j]];
            }
            for j in 0..d {
                unit[i][j] = f[[i, j]] / n.sqrt();
            }
        }
        let mut total = 0.0;
        for i in 0..b {
            let mut z = 0.0;
            let mut e = vec![0.0; b];
            for j in 0..b {
                if j != i {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += unit[i][k] * unit[j][k];
                    }
                    e[j] = (s / t).exp();
                    z += e[j];
                }
            }
            for j in 0..b {
                if j != i && e[j] > 0.0 {
                    let q = e[j] / z;
                    total -= q * q.ln();
                }
            }
        }
        let want = total / b as f64;
        let got = snd_score(&f, t).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() < TOL, "SND {got} vs {want} (B={b}, T={t})");
    }
    Ok("100 random feature sets".into())
}

pub fn info_nce_scalar() -> Check {
    let mut r = rng(23);
    let (b, d, t) = (2, 5, 0.07);
    let q = uniform(&mut r, (b, d), 1.0);
    let k = uniform(&mut r, (b, d), 1.0);
    let negs: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let unit = |m: &Array2<f64>, i: usize| -> Vec<f64> {
        let n = (0..d).map(|j| m[[i, j]] * m[[i, j]]).sum::<f64>().sqrt();
        (0..d).map(|j| m[[i, j]] / n).collect()
    };
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut want = 0.0;
    for i in 0..b {
        let qi = unit(&q, i);
        let pos = (dot(&qi, &unit(&k, i)) / t).exp();
        let mut all = pos;
        for n in &negs {
            all += (dot(&qi, n) / t).exp();
        }
        want -= (pos / all).ln();
    }
    want /= b as f64;
    let (got, grad) = info_nce(&q, &k, &negs, t);
    ensure!((got - want).abs() < TOL, "InfoNCE {got} vs {want}");
    fd_matrix(|x| info_nce(x, &k, &negs, t).0, &q, &grad, "InfoNCE")?;
    Ok(format!("B=2, queue 8: {got:.6}"))
}

fn fd_matrix(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, grad: &Array2<f64>, name: &str) -> Result<(), String> {
    let h = 1e-6;
    for idx in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_slice_mut().unwrap()[idx] += h;
        m.as_slice_mut().unwrap()[idx] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let g = grad.as_slice().unwrap()[idx];
        ensure!(close(fd, g, 1e-4, 1e-8), "{name} gradient entry {idx}: analytic {g}, numeric {fd}");
    }
    Ok(())
}

pub fn lame_fixed_point() -> Check {
    let probs = ndarray::array![[0.7, 0.2, 0.1], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8], [0.25, 0.5, 0.25]];
    let feats = ndarray::array![[1.0, 0.1], [0.9, 0.3], [-0.2, 1.0], [0.1, 0.8]];
    let (b, c) = (4, 3);
    let mut w = [[0.0f64; 4]; 4];
    for i in 0..b {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..b {
            if j == i {
                continue;
            }
            let mut s = 0.0;
            let (mut ni, mut nj) = (0.0f64, 0.0f64);
            for k in 0..2 {
                s += feats[[i, k]] * feats[[j, k]];
                ni += feats[[i, k]] * feats[[i, k]];
                nj += feats[[j, k]] * feats[[j, k]];
            }
            let cos = s / (ni.sqrt() * nj.sqrt());
            if cos > best_sim {
                best_sim = cos;
                best = j;
            }
        }
        w[i][best] += 0.5;
        w[best][i] += 0.5;
    }
    let mut z = [[0.0f64; 3]; 4];
    for i in 0..b {
        for k in 0..c {
            z[i][k] = probs[[i, k]];
        }
    }
    for _ in 0..10_000 {
        let mut next = [[0.0f64; 3]; 4];
        for i in 0..b {
            let mut s = 0.0;
            for k in 0..c {
                let mut pull = 0.0;
                for j in 0..b {
                    pull += w[i][j] * z[j][k];
                }
                next[i][k] = probs[[i, k]] * pull.exp();
                s += next[i][k];
            }
            for k in 0..c {
                next[i][k] /= s;
            }
        }
        z = next;
    }
    let aff = knn_affinity(&feats, 1);
    for i in 0..b {
        for j in 0..b {
            ensure!(aff[[i, j]] == w[i][j], "affinity ({i},{j}) = {} vs {}", aff[[i, j]], w[i][j]);
        }
    }
    let sol = lame_adjust(&probs, &aff).map_err(|e| e.to_string())?;
    for i in 0..b {
        for k in 0..c {
            let got = sol.assignments[[i, k]];
            ensure!((got - z[i][k]).abs() < TOL, "z[{i}][{k}] = {got} vs {}", z[i][k]);
        }
    }
    Ok(format!("B=4, k=1 matches within 1e-6 after {} iterations", sol.iterations))
}

pub fn spearman_rank_formula() -> Check {
    let mut r = rng(24);
    for trial in 0..100 {
        let x: Vec<f64> = (0..5).map(|_| r.random()).collect();
        let y: Vec<f64> = (0..5).map(|_| r.random()).collect();
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect()
        };
        let (rx, ry) = (rank(&x), rank(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let want = 1.0 - 6.0 * d2 / (5.0 * 24.0);
        let got = spearman(&x, &y).ok_or("undefined coefficient")?;
        ensure!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
    }
    Ok("100 random 5-point samples within 1e-9".into())
}

type Loss = Box<dyn Fn(&Forward) -> (f64, Array2<f64>, Option<Array2<f64>>)>;

fn losses(c: usize, d: usize) -> Vec<(&'static str, Loss)> {
    let mut r = rng(25);
    let teacher = uniform(&mut r, (6, c), 2.0);
    let keys = uniform(&mut r, (6, d), 1.0);
    let negs: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| r.random::<f64>() - 0.5).collect()).collect();
    let mut protos = uniform(&mut r, (c, d), 1.0);
    for mut p in protos.rows_mut() {
        let n = p.dot(&p).sqrt();
        p.mapv_inplace(|v| v / n);
    }
    let weights: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 0.5 + i as f64 / 10.0 }).collect();
    vec![
        ("entropy", Box::new(|f: &Forward| {
            let (l, g) = mean_entropy_loss(&f.logits);
            (l, g, None)
        })),
        ("weighted entropy", Box::new(move |f: &Forward| {
            let (l, g) = weighted_entropy(&f.logits, &weights, 4.0);
            (l, g, None)
        })),
        ("cross entropy", Box::new(|f: &Forward| {
            let (l, g) = cross_entropy(&f.logits, &[0, 1, 2, 0, 1, 2]);
            (l, g, None)
        })),
        ("marginal entropy", Box::new(|f: &Forward| {
            let (l, g) = marginal_entropy(&f.logits);
            (l, g, None)
        })),
        ("symmetric cross entropy", Box::new(move |f: &Forward| {
            let (l, g) = symmetric_cross_entropy(&f.logits, &teacher);
            (l, g, None)
        })),
        ("InfoNCE", Box::new(move |f: &Forward| {
            let (l, g) = info_nce(&f.features, &keys, &negs, 0.07);
            (l, Array2::zeros(f.logits.dim()), Some(g))
        })),
        ("prototype distance", Box::new(move |f: &Forward| {
            let (l, g) = prototype_distance(&f.features, &protos, &[0, 1, 2, 2, 1, 0]);
            (l, Array2::zeros(f.logits.dim()), Some(g))
        })),
    ]
}

pub fn model_gradients() -> Check {
    let x = images(26, 6, [2, 5, 5]);
    let mut checked = 0;
    for mode in [NormMode::UseBatch, NormMode::UseRunning] {
        let mut model = toy_model(27);
        model.set_norm_mode(mode);
        let d = model.feature_dim();
        for (name, loss) in losses(3, d) {
            let fwd = model.forward(&x).map_err(|e| e.to_string())?;
            let (_, dl, df) = loss(&fwd);
            let grads = model.backward(&fwd.tape, &dl, df.as_ref(), ParamScope::All);
            for (pi, g) in grads.0.iter().enumerate() {
                let n = g.len();
                for j in [0, n / 3, n / 2, n - 1] {
                    let h = 1e-5;
                    let mut plus = model.clone();
                    plus.params_mut()[pi].value[j] += h;
                    let mut minus = model.clone();
                    minus.params_mut()[pi].value[j] -= h;
                    let lp = loss(&plus.forward(&x).map_err(|e| e.to_string())?).0;
                    let lm = loss(&minus.forward(&x).map_err(|e| e.to_string())?).0;
                    let fd = (lp - lm) / (2.0 * h);
                    ensure!(
                        close(fd, g[j], 1e-4, 1e-8),
                        "{name} ({mode:?}) param {} entry {j}: analytic {}, numeric {fd}",
                        model.params()[pi].name,
                        g[j]
                    );
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} parameter entries across 7 losses and both norm modes"))
}
