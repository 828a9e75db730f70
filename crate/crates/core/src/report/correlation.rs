use super::ranking::descending_ranks;
use super::{csv_bytes, csv_records, parse_f64};
use crate::batch::LabelAccess;
use crate::error::{Error, Result};
use crate::harness::RunSummary;
use crate::metrics::Metric;

/// One config: its metric and target accuracy (percent), averaged over
/// repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPoint {
    pub config_id: usize,
    pub metric: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationExport {
    pub metric: Metric,
    pub points: Vec<CorrelationPoint>,
    /// Configs left out because a repeat diverged.
    pub diverged: Vec<usize>,
    pub spearman: Option<f64>,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&descending_ranks(x), &descending_ranks(y))
}

fn metric_of(r: &RunSummary, metric: Metric) -> Result<f64> {
    let v = match metric {
        Metric::Entropy => r.entropy,
        Metric::Consistency => r.consistency,
        Metric::Snd => r.snd,
        Metric::ProbeAccuracy => r.probe_accuracy,
        Metric::Accuracy => return Err(Error::Report("target accuracy is not a selection metric".into())),
    };
    v.ok_or_else(|| Error::Report(format!("runs carry no {}", metric.name())))
}

/// Metric against accuracy over the configs of one method.
pub fn correlation_export(runs: &[RunSummary], metric: Metric) -> Result<CorrelationExport> {
    let first = runs.first().ok_or_else(|| Error::Report("no runs to correlate".into()))?;
    if runs.iter().any(|r| r.method != first.method) {
        return Err(Error::Report("correlation runs must share a method".into()));
    }
    let access = LabelAccess::grant();
    let mut ids: Vec<usize> = runs.iter().map(RunSummary::config_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut points = Vec::new();
    let mut diverged = Vec::new();
    for id in ids {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| r.config_id() == id).collect();
        if group.iter().any(|r| r.diverged) {
            diverged.push(id);
            continue;
        }
        let n = group.len() as f64;
        let mut m = 0.0;
        for r in &group {
            m += metric_of(r, metric)?;
        }
        let acc = group.iter().map(|r| *r.target_accuracy.reveal(&access)).sum::<f64>() / n;
        points.push(CorrelationPoint {
            config_id: id,
            metric: m / n,
            accuracy: 100.0 * acc,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.metric).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    Ok(CorrelationExport {
        metric,
        spearman: spearman(&xs, &ys),
        points,
        diverged,
    })
}

impl CorrelationExport {
    pub fn to_csv(&self) -> Result<String> {
        let header = ["config_id".to_string(), self.metric.name().to_string(), "accuracy".to_string()];
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| vec![p.config_id.to_string(), format!("{}", p.metric), format!("{:.2}", p.accuracy)])
            .collect();
        csv_bytes(&header, &rows)
    }

    /// Points only; divergence and the coefficient are recomputed from them.
    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, recs) = csv_records(text)?;
        if header.len() != 3 {
            return Err(Error::Report("correlation table needs 3 columns".into()));
        }
        let metric = Metric::parse(&header[1]).ok_or_else(|| Error::Report(format!("unknown metric {:?}", header[1])))?;
        let points = recs
            .iter()
            .map(|r| {
                if r.len() != 3 {
                    return Err(Error::Report("short correlation row".into()));
                }
                Ok(CorrelationPoint {
                    config_id: r[0].parse().map_err(|_| Error::Report(format!("bad config id {:?}", r[0])))?,
                    metric: parse_f64(&r[1], "metric")?,
                    accuracy: parse_f64(&r[2], "accuracy")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let xs: Vec<f64> = points.iter().map(|p| p.metric).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
        Ok(CorrelationExport {
            metric,
            spearman: spearman(&xs, &ys),
            points,
            diverged: Vec::new(),
        })
    }
}
