#![allow(dead_code)]

use rand::Rng as _;
use ttasel::methods::{estimate_fisher, knn_affinity, lame_adjust, Eata, Memo, MethodKind, Sar, Tent, TtaMethod};
use ttasel::report::{win_matrix, Experiment, OutcomeTable};
use ttasel::selection::{select, Strategy};
use ttasel::ParamGroup;

use super::*;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub type Check = Result<String, String>;

pub fn oracle_dominance() -> Check {
    let mut r = rng(1);
    let mut checked = 0;
    for trial in 0..300 {
        let runs = random_runs(&mut r, MethodKind::Tent, 1 + trial % 12, 0);
        let oracle = select(Strategy::Oracle, &runs).map_err(|e| e.to_string())?;
        for s in Strategy::ALL {
            let o = select(s, &runs).map_err(|e| e.to_string())?;
            ensure!(o.accuracy <= oracle.accuracy, "{s} beat ORACLE on trial {trial}");
            ensure!(o.gap >= 0.0, "{s} has a negative gap on trial {trial}");
            checked += 1;
        }
    }
    Ok(format!("{checked} selections never exceed ORACLE"))
}

pub fn median_position() -> Check {
    let mut r = rng(2);
    for trial in 0..300 {
        let n = 1 + trial % 9;
        let runs = random_runs(&mut r, MethodKind::Sar, n, 0);
        let mut accs: Vec<f64> = runs.iter().map(|x| reveal_acc(x)).collect();
        accs.sort_by(f64::total_cmp);
        let o = select(Strategy::Median, &runs).map_err(|e| e.to_string())?;
        ensure!(o.accuracy == accs[(n - 1) / 2], "MED chose {} not the lower median on trial {trial}", o.accuracy);
    }
    Ok("MED returns the lower median on 300 grids".into())
}

/// Target accuracy as seen through a selection.
fn reveal_acc(run: &ttasel::harness::RunSummary) -> f64 {
    select(Strategy::Oracle, std::slice::from_ref(run)).unwrap().accuracy
}

pub fn label_isolation() -> Check {
    let mut r = rng(3);
    let unsupervised: Vec<Strategy> = Strategy::ALL.into_iter().filter(|s| s.is_unsupervised()).collect();
    for trial in 0..200 {
        let runs = random_runs(&mut r, MethodKind::Eata, 2 + trial % 10, 0);
        let mut shuffled = runs.clone();
        for s in &mut shuffled {
            s.target_accuracy = ttasel::batch::Guarded::new(r.random());
        }
        for &s in &unsupervised {
            let a = select(s, &runs).map_err(|e| e.to_string())?.config_id;
            let b = select(s, &shuffled).map_err(|e| e.to_string())?.config_id;
            ensure!(a == b, "{s} changed its choice when target labels changed (trial {trial})");
        }
    }
    let names: Vec<&str> = unsupervised.iter().map(|s| s.name()).collect();
    Ok(format!("{} ignore target accuracy", names.join("/")))
}

pub fn memo_permutation() -> Check {
    let model = toy_model(11);
    let b = batch(5, 6, 0);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut a = Memo::new(model.clone(), HyperparamConfig { memo_augs: 4, ..hp(0.05, 0.0) }, 9);
    let start = a.digest();
    let pa = a.step(&b).map_err(|e| e.to_string())?.predictions();
    let pa_probs = a.step(&b).map_err(|e| e.to_string())?.probs;
    let mut c = Memo::new(model, HyperparamConfig { memo_augs: 4, ..hp(0.05, 0.0) }, 9);
    let out = c.step(&permuted(&b, &perm)).map_err(|e| e.to_string())?;
    for (i, &p) in perm.iter().enumerate() {
        ensure!(out.predictions()[i] == pa[p], "prediction {i} did not follow the permutation");
        for k in 0..3 {
            ensure!(out.probs[[i, k]] == pa_probs[[p, k]], "probabilities of sample {i} differ after permutation");
        }
    }
    ensure!(a.digest() == start, "MEMO kept state across batches");
    Ok("permuted batch gives permuted outputs; state unchanged".into())
}

pub fn reset_hashes() -> Check {
    let model = toy_model(12);
    let source = model.clone();
    let mut sar = Sar::new(model.clone(), HyperparamConfig { entropy_factor: 1.0, reset_threshold: 0.0, ..hp(0.05, 0.9) })
        .map_err(|e| e.to_string())?;
    let start = sar.digest();
    for t in 0..3 {
        sar.step(&batch(20 + t, 8, t as usize)).map_err(|e| e.to_string())?;
    }
    ensure!(sar.digest() != start, "SAR did not adapt");
    sar.reset();
    ensure!(sar.digest() == start, "SAR reset() did not restore the initial state");

    let mut auto = Sar::new(model.clone(), HyperparamConfig { entropy_factor: 1.0, reset_threshold: 10.0, ..hp(0.05, 0.9) })
        .map_err(|e| e.to_string())?;
    let auto_start = auto.digest();
    let out = auto.step(&batch(30, 8, 0)).map_err(|e| e.to_string())?;
    ensure!(out.reset, "SAR did not trigger its own reset");
    ensure!(auto.digest() == auto_start, "SAR self-reset left a different state");
    let mut reference = Sar::new(source, HyperparamConfig::default()).map_err(|e| e.to_string())?;
    reference.reset();
    ensure!(
        auto.deployed_model().group_values(ParamGroup::NormalizationAffine)
            == reference.deployed_model().group_values(ParamGroup::NormalizationAffine),
        "SAR self-reset parameters differ from source"
    );

    let mut memo = Memo::new(model, HyperparamConfig { memo_augs: 3, ..hp(0.05, 0.9) }, 1);
    let m0 = memo.digest();
    memo.step(&batch(40, 4, 0)).map_err(|e| e.to_string())?;
    ensure!(memo.digest() == m0, "MEMO digest changed after a step");
    memo.reset();
    ensure!(memo.digest() == m0, "MEMO reset changed its state");
    Ok("SAR reset()/self-reset and MEMO reset return the initial hash".into())
}

fn unchanged_outside_norm(name: &str, before: &AdaptableModel, after: &AdaptableModel) -> Result<(), String> {
    for g in [ParamGroup::FeatureExtractor, ParamGroup::ClassifierHead] {
        ensure!(before.group_values(g) == after.group_values(g), "{name} changed {g:?}");
    }
    ensure!(
        before.group_values(ParamGroup::NormalizationAffine) != after.group_values(ParamGroup::NormalizationAffine),
        "{name} did not update normalization parameters"
    );
    Ok(())
}

pub fn parameter_scope() -> Check {
    let model = toy_model(13);
    let steps = |m: &mut dyn TtaMethod| -> Result<(), String> {
        for t in 0..4 {
            m.step(&batch(50 + t, 8, t as usize)).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    let mut tent = Tent::new(model.clone(), hp(0.05, 0.9)).map_err(|e| e.to_string())?;
    steps(&mut tent)?;
    unchanged_outside_norm("tent", &model, tent.deployed_model())?;

    let src = batch(60, 12, 0);
    let fisher = estimate_fisher(&model, src.samples(), &(0..12).map(|i| i % 3).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let cfg = HyperparamConfig {
        entropy_factor: 1.0,
        redundancy_threshold: 1.0,
        fisher_weight: 1.0,
        ..hp(0.05, 0.9)
    };
    let mut eata = Eata::new(model.clone(), cfg, fisher).map_err(|e| e.to_string())?;
    steps(&mut eata)?;
    unchanged_outside_norm("eata", &model, eata.deployed_model())?;

    let mut sar = Sar::new(model.clone(), HyperparamConfig { entropy_factor: 1.0, reset_threshold: 0.0, ..hp(0.05, 0.9) })
        .map_err(|e| e.to_string())?;
    steps(&mut sar)?;
    unchanged_outside_norm("sar", &model, sar.deployed_model())?;
    Ok("TENT/EATA/SAR change normalization affine parameters only".into())
}

pub fn lame_simplex_monotone() -> Check {
    let mut r = rng(4);
    let mut iters = 0;
    for trial in 0..300 {
        let b = 1 + trial % 14;
        let c = 2 + trial % 5;
        let k = trial % 5;
        let probs = random_simplex_rows(&mut r, b, c);
        let feats = uniform(&mut r, (b, 4), 1.0);
        let w = knn_affinity(&feats, k);
        let sol = lame_adjust(&probs, &w).map_err(|e| e.to_string())?;
        for row in sol.assignments.rows() {
            ensure!(row.iter().all(|&v| v >= 0.0), "negative assignment on trial {trial}");
            ensure!((row.sum() - 1.0).abs() < 1e-9, "assignment row off the simplex on trial {trial}");
        }
        for pair in sol.objective.windows(2) {
            ensure!(pair[1] >= pair[0] - 1e-9, "objective decreased {} -> {} on trial {trial}", pair[0], pair[1]);
        }
        iters += sol.iterations;
    }
    Ok(format!("300 instances, {iters} iterations, objective never decreases"))
}

pub fn win_matrix_invariants() -> Check {
    let mut r = rng(5);
    for trial in 0..50 {
        let mut experiments = Vec::new();
        for e in 0..1 + trial % 3 {
            let mut runs = Vec::new();
            for method in [MethodKind::Tent, MethodKind::Eata, MethodKind::Memo] {
                for rep in 0..3 {
                    runs.extend(random_runs(&mut r, method, 4, rep));
                }
            }
            experiments.push(Experiment {
                id: format!("e{e}"),
                plan_hash: format!("h{e}"),
                runs,
                baseline: None,
            });
        }
        let table = OutcomeTable::build(&experiments, &Strategy::ALL).map_err(|e| e.to_string())?;
        let w = win_matrix(&table, &Strategy::ALL, None).map_err(|e| e.to_string())?;
        for (i, s) in Strategy::ALL.iter().enumerate() {
            ensure!(w.counts[i][i] == w.cells, "diagonal of {s} is not the cell count");
            ensure!(w.get(Strategy::Oracle, *s) == Some(w.cells), "ORACLE does not dominate {s}");
            for j in 0..Strategy::ALL.len() {
                ensure!(w.counts[i][j] + w.counts[j][i] >= w.cells, "pair counts below the cell count");
            }
        }
    }
    Ok("diagonal = cells, ORACLE row full on 50 random stores".into())
}
