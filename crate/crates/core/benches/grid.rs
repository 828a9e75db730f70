use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use ttasel::data::SyntheticSpec;
use ttasel::exec::Execution;
use ttasel::harness::{DatasetSpec, ExperimentPlan, Prepared};
use ttasel::methods::MethodKind;
use ttasel::streams::StreamSpec;

fn plan() -> ExperimentPlan {
    let text = r#"
        plan_version = 1
        seed = 3
        repeats = 1
        methods = ["tent"]
        [stream]
        dataset_id = "bench"
        domains = ["gaussian_noise"]
        batch_size = 10
        [dataset]
        kind = "synthetic"
        [model.train]
        epochs = 2
        [grid]
        learning_rates = [0.1, 0.025, 0.00625, 0.00156]
        momenta = [0.0, 0.9]
    "#;
    let mut plan = ExperimentPlan::from_toml(text).expect("bench plan");
    plan.dataset = DatasetSpec::Synthetic(SyntheticSpec {
        source_train: 300,
        source_validation: 100,
        samples_per_domain: 200,
        ..SyntheticSpec::default()
    });
    plan.stream = StreamSpec {
        dataset_id: "bench".into(),
        ..plan.stream
    };
    plan
}

fn grid(c: &mut Criterion) {
    let plan = plan();
    let prepared = Prepared::new(&plan, Path::new("."), None).expect("prepare");
    let units: Vec<_> = plan.units().into_iter().filter(|u| u.method == MethodKind::Tent).collect();
    let mut group = c.benchmark_group("tent-grid");
    group.sample_size(10);
    for (name, exec) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let out = exec.map(units.clone(), |u| prepared.run(&u).expect("run"));
                assert_eq!(out.len(), units.len());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, grid);
criterion_main!(benches);
