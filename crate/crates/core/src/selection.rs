//! Hyperparameter selection strategies over completed runs.

use serde::{Deserialize, Serialize};

use crate::batch::LabelAccess;
use crate::error::{Error, Result};
use crate::harness::RunSummary;
use crate::methods::MethodKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "S-ACC")]
    SourceAccuracy,
    #[serde(rename = "C-ACC")]
    CrossAccuracy,
    #[serde(rename = "ENT")]
    Entropy,
    #[serde(rename = "CON")]
    Consistency,
    #[serde(rename = "SND")]
    Snd,
    #[serde(rename = "100-RND")]
    Probe,
    #[serde(rename = "ORACLE")]
    Oracle,
    #[serde(rename = "MED")]
    Median,
    #[serde(rename = "CAT")]
    Category,
    #[serde(rename = "OBJ")]
    Objective,
}

impl Strategy {
    pub const BASIC: [Strategy; 8] = [
        Strategy::SourceAccuracy,
        Strategy::CrossAccuracy,
        Strategy::Entropy,
        Strategy::Consistency,
        Strategy::Snd,
        Strategy::Probe,
        Strategy::Oracle,
        Strategy::Median,
    ];

    pub const ALL: [Strategy; 10] = [
        Strategy::SourceAccuracy,
        Strategy::CrossAccuracy,
        Strategy::Entropy,
        Strategy::Consistency,
        Strategy::Snd,
        Strategy::Probe,
        Strategy::Oracle,
        Strategy::Median,
        Strategy::Category,
        Strategy::Objective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SourceAccuracy => "S-ACC",
            Strategy::CrossAccuracy => "C-ACC",
            Strategy::Entropy => "ENT",
            Strategy::Consistency => "CON",
            Strategy::Snd => "SND",
            Strategy::Probe => "100-RND",
            Strategy::Oracle => "ORACLE",
            Strategy::Median => "MED",
            Strategy::Category => "CAT",
            Strategy::Objective => "OBJ",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name().eq_ignore_ascii_case(name))
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Strategy::Category | Strategy::Objective)
    }

    /// True if the strategy never reads target labels.
    pub fn is_unsupervised(self) -> bool {
        matches!(
            self,
            Strategy::SourceAccuracy | Strategy::CrossAccuracy | Strategy::Entropy | Strategy::Consistency | Strategy::Snd
        )
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    EntropyMin,
    ConsistencyBased,
}

/// Family of a method by its adaptation objective.
pub fn category_of(method: MethodKind) -> Result<Category> {
    match method {
        MethodKind::Tent | MethodKind::Sar | MethodKind::Eata => Ok(Category::EntropyMin),
        MethodKind::RmtSf | MethodKind::AdaContrast | MethodKind::Memo => Ok(Category::ConsistencyBased),
        MethodKind::Lame => Err(Error::invalid("lame has no hyperparameters to select")),
    }
}

/// The basic strategy a (possibly meta) strategy stands for on `method`.
pub fn resolve(strategy: Strategy, method: MethodKind) -> Result<Strategy> {
    Ok(match strategy {
        Strategy::Category => match category_of(method)? {
            Category::EntropyMin => Strategy::Consistency,
            Category::ConsistencyBased => Strategy::Snd,
        },
        Strategy::Objective => match category_of(method)? {
            Category::EntropyMin => Strategy::Entropy,
            Category::ConsistencyBased => Strategy::Consistency,
        },
        s => s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub strategy: Strategy,
    pub method: MethodKind,
    pub repeat: usize,
    pub config_id: usize,
    /// Target accuracy of the chosen config, as a fraction.
    pub accuracy: f64,
    pub oracle_accuracy: f64,
    /// `oracle_accuracy - accuracy`.
    pub gap: f64,
    /// Gap relative to the oracle accuracy, in percent.
    pub relative_gap: f64,
}

fn field(strategy: Strategy, name: &str, v: Option<f64>) -> Result<f64> {
    v.ok_or_else(|| Error::MissingField {
        strategy: strategy.name().into(),
        field: name.into(),
    })
}

fn pick(runs: &[&RunSummary], score: impl Fn(&RunSummary) -> f64, maximize: bool) -> usize {
    let mut best = 0;
    for i in 1..runs.len() {
        let (a, b) = (score(runs[i]), score(runs[best]));
        if (maximize && a > b) || (!maximize && a < b) {
            best = i;
        }
    }
    best
}

/// Choose one config among runs of a single method and repeat. Ties go to
/// the smallest config id.
pub fn select(strategy: Strategy, runs: &[RunSummary]) -> Result<SelectionOutcome> {
    let first = runs.first().ok_or_else(|| Error::invalid("selection needs at least one run"))?;
    if runs.iter().any(|r| r.method != first.method || r.repeat != first.repeat) {
        return Err(Error::invalid("all runs must share method and repeat"));
    }
    let strategy_used = resolve(strategy, first.method)?;
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by_key(|r| r.config_id());
    let access = LabelAccess::grant();
    let acc = |r: &RunSummary| *r.target_accuracy.reveal(&access);

    let check = |name: &str, get: fn(&RunSummary) -> Option<f64>| -> Result<()> {
        for r in &sorted {
            field(strategy_used, name, get(r))?;
        }
        Ok(())
    };
    let chosen = match strategy_used {
        Strategy::Entropy => {
            check("entropy", |r| r.entropy)?;
            pick(&sorted, |r| r.entropy.unwrap(), false)
        }
        Strategy::Consistency => {
            check("consistency", |r| r.consistency)?;
            pick(&sorted, |r| r.consistency.unwrap(), false)
        }
        Strategy::Snd => {
            check("snd", |r| r.snd)?;
            pick(&sorted, |r| r.snd.unwrap(), true)
        }
        Strategy::SourceAccuracy => {
            check("source_accuracy", |r| r.source_accuracy)?;
            pick(&sorted, |r| r.source_accuracy.unwrap(), true)
        }
        Strategy::CrossAccuracy => {
            check("cross_accuracy", |r| r.cross_accuracy)?;
            pick(&sorted, |r| r.cross_accuracy.unwrap(), true)
        }
        Strategy::Probe => {
            check("probe_accuracy", |r| r.probe_accuracy)?;
            pick(&sorted, |r| r.probe_accuracy.unwrap(), true)
        }
        Strategy::Oracle => pick(&sorted, acc, true),
        Strategy::Median => {
            let mut order: Vec<usize> = (0..sorted.len()).collect();
            order.sort_by(|&a, &b| acc(sorted[a]).total_cmp(&acc(sorted[b])).then(a.cmp(&b)));
            order[(order.len() - 1) / 2]
        }
        Strategy::Category | Strategy::Objective => unreachable!("meta strategies are resolved"),
    };
    let oracle = acc(sorted[pick(&sorted, acc, true)]);
    let accuracy = acc(sorted[chosen]);
    let gap = oracle - accuracy;
    Ok(SelectionOutcome {
        strategy,
        method: first.method,
        repeat: first.repeat,
        config_id: sorted[chosen].config_id(),
        accuracy,
        oracle_accuracy: oracle,
        gap,
        relative_gap: if oracle > 0.0 { 100.0 * gap / oracle } else { 0.0 },
    })
}

/// Selection repeated independently for each repeat, with the mean and
/// standard deviation of the chosen accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub strategy: Strategy,
    pub method: MethodKind,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_gap: f64,
    pub mean_relative_gap: f64,
    pub per_seed: Vec<SelectionOutcome>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs of one method; grouped by repeat before selecting.
pub fn select_per_seed(strategy: Strategy, runs: &[RunSummary]) -> Result<SeedAggregate> {
    let first = runs.first().ok_or_else(|| Error::invalid("selection needs at least one run"))?;
    let mut repeats: Vec<usize> = runs.iter().map(|r| r.repeat).collect();
    repeats.sort_unstable();
    repeats.dedup();
    let mut per_seed = Vec::with_capacity(repeats.len());
    for rep in repeats {
        let group: Vec<RunSummary> = runs.iter().filter(|r| r.repeat == rep).cloned().collect();
        per_seed.push(select(strategy, &group)?);
    }
    let accs: Vec<f64> = per_seed.iter().map(|o| o.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let n = per_seed.len() as f64;
    Ok(SeedAggregate {
        strategy,
        method: first.method,
        mean_accuracy,
        std_accuracy,
        mean_gap: per_seed.iter().map(|o| o.gap).sum::<f64>() / n,
        mean_relative_gap: per_seed.iter().map(|o| o.relative_gap).sum::<f64>() / n,
        per_seed,
    })
}
