#![allow(dead_code)]

pub mod invariants;
pub mod oracles;
pub mod plans;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttasel::batch::{Batch, Guarded};
use ttasel::harness::RunSummary;
use ttasel::methods::{HyperparamConfig, MethodKind};
use ttasel::{AdaptableModel, Architecture};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn random_simplex_rows(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((b, c), |_| rng.random::<f64>() + 1e-3);
    for mut r in p.rows_mut() {
        let s = r.sum();
        r.mapv_inplace(|v| v / s);
    }
    p
}

pub fn toy_arch() -> Architecture {
    Architecture::small_conv([2, 5, 5], [3, 4], 3)
}

pub fn toy_model(seed: u64) -> AdaptableModel {
    AdaptableModel::new(toy_arch(), seed).unwrap()
}

pub fn images(seed: u64, b: usize, shape: [usize; 3]) -> Array4<f64> {
    let mut r = rng(seed);
    Array4::from_shape_fn((b, shape[0], shape[1], shape[2]), |_| 2.0 * r.random::<f64>() - 1.0)
}

pub fn batch(seed: u64, b: usize, step: usize) -> Batch {
    let x = images(seed, b, [2, 5, 5]);
    let ids = (0..b).map(|i| step * b + i).collect();
    Batch::new(x, (0..b).map(|i| i % 3).collect(), ids, step * b, step, 0)
}

pub fn permuted(batch: &Batch, perm: &[usize]) -> Batch {
    let x = batch.samples();
    let mut out = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&x.index_axis(ndarray::Axis(0), p));
    }
    let ids = perm.iter().map(|&p| batch.sample_ids[p]).collect();
    Batch::new(out, vec![0; perm.len()], ids, batch.offset, batch.step, batch.domain)
}

pub fn hp(lr: f64, momentum: f64) -> HyperparamConfig {
    HyperparamConfig {
        lr,
        momentum,
        ..HyperparamConfig::default()
    }
}

/// A completed run with the given metrics.
pub fn summary(method: MethodKind, config_id: usize, repeat: usize, metrics: [f64; 6], acc: f64) -> RunSummary {
    RunSummary {
        plan_hash: "fixture".into(),
        method,
        config: HyperparamConfig {
            config_id,
            ..HyperparamConfig::default()
        },
        repeat,
        run_seed: 0,
        stream_length: 100,
        steps: 10,
        entropy: Some(metrics[0]),
        consistency: Some(metrics[1]),
        snd: Some(metrics[2]),
        source_accuracy: Some(metrics[3]),
        probe_accuracy: Some(metrics[4]),
        cross_accuracy: Some(metrics[5]),
        target_accuracy: Guarded::new(acc),
        diverged: false,
        resets: 0,
        source_hash: String::new(),
        final_hash: String::new(),
        log_sha256: String::new(),
    }
}

pub fn random_runs(rng: &mut ChaCha8Rng, method: MethodKind, configs: usize, repeat: usize) -> Vec<RunSummary> {
    (0..configs)
        .map(|c| {
            let m = [(); 6].map(|_| (rng.random::<f64>() * 8.0).round() / 8.0);
            summary(method, c, repeat, m, (rng.random::<f64>() * 20.0).round() / 20.0)
        })
        .collect()
}

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Every file under `dir` except timing records, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
