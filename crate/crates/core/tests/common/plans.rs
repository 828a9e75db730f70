#![allow(dead_code)]

use ttasel::harness::ExperimentPlan;

/// A full grid over a very small synthetic task.
pub const TINY: &str = r#"
plan_version = 1
seed = 11
repeats = 2
methods = ["tent", "sar", "lame", "memo"]
probe_size = 20

[stream]
dataset_id = "tiny"
domains = ["gaussian_noise", "contrast"]
batch_size = 10

[dataset]
kind = "synthetic"
source_train = 200
source_validation = 60
samples_per_domain = 40

[model.train]
epochs = 2

[grid]
learning_rates = [0.1, 0.01]
momenta = [0.0, 0.9]

[search]
draws = 2

[hyperparams]
memo_augs = 2
"#;

pub fn tiny() -> ExperimentPlan {
    ExperimentPlan::from_toml(TINY).unwrap()
}

pub fn all_methods(repeats: usize) -> ExperimentPlan {
    let text = format!(
        "plan_version = 1\nseed = 0\nrepeats = {repeats}\nmethods = [\"tent\", \"eata\", \"sar\", \"adacontrast\", \"memo\", \"lame\", \"rmt-sf\"]\n\
         [stream]\ndataset_id = \"grid\"\ndomains = [\"gaussian_noise\"]\nbatch_size = 10\n[dataset]\nkind = \"synthetic\"\n"
    );
    ExperimentPlan::from_toml(&text).unwrap()
}
