//! Tables and plots over the results store: per-strategy outcomes and
//! gaps, win matrices, rankings, metric/accuracy correlations and online
//! traces. Every table has a CSV form that parses back to the same bytes.

mod correlation;
mod ranking;
pub mod svg;
mod trace;
mod win;

pub use correlation::{correlation_export, spearman, CorrelationExport, CorrelationPoint};
pub use ranking::{ranking_table, RankingTable};
pub use trace::{online_trace, Trace, TracePoint};
pub use win::{win_matrix, WinMatrix};

use crate::batch::LabelAccess;
use crate::error::{Error, Result};
use crate::harness::{Baseline, ResultsStore, RunSummary};
use crate::methods::MethodKind;
use crate::selection::{mean_std, select_per_seed, Strategy};

/// Name of the frozen source model in report tables.
pub const SOURCE: &str = "source";

/// All completed runs of one plan.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub id: String,
    pub plan_hash: String,
    pub runs: Vec<RunSummary>,
    pub baseline: Option<Baseline>,
}

impl Experiment {
    pub fn methods(&self) -> Vec<MethodKind> {
        let mut m: Vec<MethodKind> = self.runs.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn runs_of(&self, method: MethodKind) -> Vec<RunSummary> {
        self.runs.iter().filter(|r| r.method == method).cloned().collect()
    }
}

/// Load the given plans. Experiments are named by their stream's dataset
/// id, made unique with the plan hash when needed.
pub fn load_experiments(store: &ResultsStore, hashes: &[String]) -> Result<Vec<Experiment>> {
    let mut out = Vec::new();
    for h in hashes {
        let plan = store.read_plan(h)?;
        out.push(Experiment {
            id: plan.stream.dataset_id.clone(),
            plan_hash: h.clone(),
            runs: store.load_runs(h)?,
            baseline: store.read_baseline(h)?,
        });
    }
    let ids: Vec<String> = out.iter().map(|e| e.id.clone()).collect();
    for e in &mut out {
        if ids.iter().filter(|i| **i == e.id).count() > 1 {
            e.id = format!("{}@{}", e.id, e.plan_hash);
        }
    }
    Ok(out)
}

/// Strategies every run of every experiment can support.
pub fn available_strategies(experiments: &[Experiment]) -> Vec<Strategy> {
    let runs = || experiments.iter().flat_map(|e| e.runs.iter());
    Strategy::ALL
        .into_iter()
        .filter(|s| match s {
            Strategy::CrossAccuracy => runs().all(|r| r.cross_accuracy.is_some()),
            Strategy::SourceAccuracy => runs().all(|r| r.source_accuracy.is_some()),
            Strategy::Probe => runs().all(|r| r.probe_accuracy.is_some()),
            Strategy::Snd => runs().all(|r| r.snd.is_some()),
            Strategy::Entropy | Strategy::Category | Strategy::Objective | Strategy::Consistency => {
                runs().all(|r| r.entropy.is_some() && r.consistency.is_some() && r.snd.is_some())
            }
            _ => true,
        })
        .collect()
}

/// Chosen accuracy of one (experiment, method, strategy) cell, averaged
/// over repeats. Accuracies and gaps are in percentage points; the relative
/// gap is in percent of the oracle accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRow {
    pub experiment: String,
    pub method: String,
    pub strategy: Strategy,
    pub accuracy: f64,
    pub std: f64,
    pub gap: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutcomeTable {
    pub rows: Vec<OutcomeRow>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", x)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Report(format!("bad {what} value {s:?}")))
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Strategy::parse(s).ok_or_else(|| Error::Report(format!("unknown strategy {s:?}")))
}

pub(crate) fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub(crate) fn csv_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

impl OutcomeTable {
    /// Select with every strategy on every method of every experiment.
    /// LAME has a single parameter-free run, which every strategy returns;
    /// the frozen source model is added from the baseline when present.
    pub fn build(experiments: &[Experiment], strategies: &[Strategy]) -> Result<Self> {
        let access = LabelAccess::grant();
        let mut rows = Vec::new();
        for e in experiments {
            for method in e.methods() {
                let runs = e.runs_of(method);
                for &s in strategies {
                    let used = if method == MethodKind::Lame { Strategy::Oracle } else { s };
                    let agg = select_per_seed(used, &runs)?;
                    rows.push(OutcomeRow {
                        experiment: e.id.clone(),
                        method: method.name().into(),
                        strategy: s,
                        accuracy: 100.0 * agg.mean_accuracy,
                        std: 100.0 * agg.std_accuracy,
                        gap: 100.0 * agg.mean_gap,
                        relative_gap: agg.mean_relative_gap,
                    });
                }
            }
            if let Some(b) = &e.baseline {
                let accs: Vec<f64> = b.stream_accuracy.iter().map(|a| 100.0 * a.reveal(&access)).collect();
                let (mean, std) = mean_std(&accs);
                for &s in strategies {
                    rows.push(OutcomeRow {
                        experiment: e.id.clone(),
                        method: SOURCE.into(),
                        strategy: s,
                        accuracy: mean,
                        std,
                        gap: 0.0,
                        relative_gap: 0.0,
                    });
                }
            }
        }
        Ok(OutcomeTable { rows })
    }

    pub fn get(&self, experiment: &str, method: &str, strategy: Strategy) -> Option<&OutcomeRow> {
        self.rows
            .iter()
            .find(|r| r.experiment == experiment && r.method == method && r.strategy == strategy)
    }

    pub fn experiments(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.experiment) {
                out.push(r.experiment.clone());
            }
        }
        out
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out: Vec<Strategy> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.strategy) {
                out.push(r.strategy);
            }
        }
        out
    }

    /// The gaps table.
    pub fn to_csv(&self) -> Result<String> {
        let header = ["experiment", "method", "strategy", "accuracy", "std", "gap", "relative_gap"].map(String::from);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.experiment.clone(),
                    r.method.clone(),
                    r.strategy.name().into(),
                    pct(r.accuracy),
                    pct(r.std),
                    pct(r.gap),
                    pct(r.relative_gap),
                ]
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, recs) = csv_records(text)?;
        if header.len() != 7 {
            return Err(Error::Report("outcome table needs 7 columns".into()));
        }
        let rows = recs
            .into_iter()
            .map(|r| {
                if r.len() != 7 {
                    return Err(Error::Report("short outcome row".into()));
                }
                Ok(OutcomeRow {
                    experiment: r[0].clone(),
                    method: r[1].clone(),
                    strategy: parse_strategy(&r[2])?,
                    accuracy: parse_f64(&r[3], "accuracy")?,
                    std: parse_f64(&r[4], "std")?,
                    gap: parse_f64(&r[5], "gap")?,
                    relative_gap: parse_f64(&r[6], "relative gap")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeTable { rows })
    }
}

/// Make a string safe for use in a file name.
pub fn file_stem(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| {
            p.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("_")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_csv_round_trip() {
        let t = OutcomeTable {
            rows: vec![OutcomeRow {
                experiment: "desk, v1".into(),
                method: "tent".into(),
                strategy: Strategy::Probe,
                accuracy: 61.23456,
                std: 0.5,
                gap: 1.0 / 3.0,
                relative_gap: 0.0,
            }],
        };
        let csv = t.to_csv().unwrap();
        let again = OutcomeTable::from_csv(&csv).unwrap().to_csv().unwrap();
        assert_eq!(csv, again);
        assert!(csv.contains("61.23"));
    }
}
