mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use ttasel::metrics::{snd_score, Metric, MetricAccumulator};
use ttasel::ModelState;

proptest! {
    #[test]
    fn snd_is_invariant_to_sample_order(seed in 0u64..1000, b in 2usize..9, shift in 1usize..8) {
        let mut r = rng(seed);
        let f = uniform(&mut r, (b, 4), 1.0);
        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let g = Array2::from_shape_fn((b, 4), |(i, j)| f[[perm[i], j]]);
        let (x, y) = (snd_score(&f, 0.05).unwrap(), snd_score(&g, 0.05).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn accumulator_is_the_sample_weighted_mean(values in prop::collection::vec((-5.0f64..5.0, 1usize..20), 1..30)) {
        let mut acc = MetricAccumulator::new();
        let mut split = MetricAccumulator::new();
        for &(v, n) in &values {
            acc.add(Metric::Consistency, v, n);
            for _ in 0..n {
                split.add(Metric::Consistency, v, 1);
            }
        }
        let total: usize = values.iter().map(|v| v.1).sum();
        let want = values.iter().map(|&(v, n)| v * n as f64).sum::<f64>() / total as f64;
        prop_assert!((acc.value(Metric::Consistency).unwrap() - want).abs() < 1e-12);
        prop_assert!((acc.value(Metric::Consistency).unwrap() - split.value(Metric::Consistency).unwrap()).abs() < 1e-12);
        prop_assert_eq!(acc.count(Metric::Consistency), total);
    }
}

#[test]
fn snapshots_round_trip_bit_exactly() {
    let mut model = toy_model(3);
    let x = images(4, 5, [2, 5, 5]);
    model.set_norm_mode(ttasel::NormMode::UseBatch);
    let fwd = model.forward(&x).unwrap();
    let (_, d) = ttasel::methods::losses::mean_entropy_loss(&fwd.logits);
    let g = model.backward(&fwd.tape, &d, None, ttasel::ParamScope::All);
    model.sgd_step(&g, 0.1, 0.9, ttasel::ParamScope::All);
    model.commit_running_stats(&fwd.tape);
    let state = ModelState::from_bytes(&model.snapshot().to_bytes()).unwrap();
    let mut other = toy_model(99);
    other.restore(&state).unwrap();
    assert_eq!(other.state_hash(), model.state_hash());
    assert_eq!(other.forward(&x).unwrap().logits, model.forward(&x).unwrap().logits);
    let mut bytes = model.snapshot().to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(ModelState::from_bytes(&bytes).is_err());
}

#[test]
fn restoring_into_a_different_architecture_fails() {
    let state = toy_model(1).snapshot();
    let mut other = ttasel::AdaptableModel::new(ttasel::Architecture::small_conv([2, 5, 5], [4, 4], 3), 1).unwrap();
    assert!(other.restore(&state).is_err());
}
