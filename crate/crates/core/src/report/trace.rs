use super::{csv_bytes, csv_records, parse_f64};
use crate::error::{Error, Result};
use crate::harness::LogRow;
use crate::metrics::Metric;

/// Cumulative accuracy of one config after one batch, and whether the
/// metric would pick this config if the stream stopped here.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub config_id: usize,
    /// Percent.
    pub cum_accuracy: f64,
    pub cum_metric: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub metric: Metric,
    pub points: Vec<TracePoint>,
}

fn cum_value(row: &LogRow, metric: Metric) -> Result<Option<f64>> {
    Ok(match metric {
        Metric::Entropy => Some(row.cum_entropy),
        Metric::Consistency => Some(row.cum_consistency),
        Metric::Snd => row.cum_snd,
        Metric::Accuracy => Some(row.cum_accuracy),
        Metric::ProbeAccuracy => return Err(Error::Report("probe accuracy has no online trace".into())),
    })
}

fn maximize(metric: Metric) -> bool {
    matches!(metric, Metric::Snd | Metric::Accuracy)
}

/// Online selection trace over equally long logs. At every step the config
/// with the best cumulative metric is marked; ties go to the lower config
/// id, and configs without a value yet are not eligible.
pub fn online_trace(logs: &[(usize, Vec<LogRow>)], metric: Metric) -> Result<Trace> {
    let mut logs: Vec<&(usize, Vec<LogRow>)> = logs.iter().collect();
    logs.sort_by_key(|(id, _)| *id);
    let steps = logs.first().map(|(_, l)| l.len()).unwrap_or(0);
    if logs.iter().any(|(_, l)| l.len() != steps) {
        return Err(Error::Report("trace logs differ in length".into()));
    }
    let mut points = Vec::with_capacity(steps * logs.len());
    for t in 0..steps {
        let values = logs
            .iter()
            .map(|(_, l)| cum_value(&l[t], metric))
            .collect::<Result<Vec<Option<f64>>>>()?;
        let mut best: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let better = match best.and_then(|b| values[b]) {
                None => true,
                Some(b) => (maximize(metric) && *v > b) || (!maximize(metric) && *v < b),
            };
            if better {
                best = Some(i);
            }
        }
        for (i, (id, l)) in logs.iter().enumerate() {
            points.push(TracePoint {
                step: t,
                config_id: *id,
                cum_accuracy: 100.0 * l[t].cum_accuracy,
                cum_metric: values[i],
                best: best == Some(i),
            });
        }
    }
    Ok(Trace { metric, points })
}

impl Trace {
    pub fn to_csv(&self) -> Result<String> {
        let header = ["step", "config_id", "cum_accuracy", &format!("cum_{}", self.metric.name()), "best"].map(String::from);
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    p.step.to_string(),
                    p.config_id.to_string(),
                    format!("{:.2}", p.cum_accuracy),
                    p.cum_metric.map(|v| v.to_string()).unwrap_or_default(),
                    (p.best as u8).to_string(),
                ]
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, recs) = csv_records(text)?;
        let metric = header
            .get(3)
            .and_then(|h| h.strip_prefix("cum_"))
            .and_then(Metric::parse)
            .ok_or_else(|| Error::Report("trace header names no metric".into()))?;
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Report(format!("bad integer {s:?}")));
        let points = recs
            .iter()
            .map(|r| {
                if r.len() != 5 {
                    return Err(Error::Report("short trace row".into()));
                }
                Ok(TracePoint {
                    step: int(&r[0])?,
                    config_id: int(&r[1])?,
                    cum_accuracy: parse_f64(&r[2], "accuracy")?,
                    cum_metric: if r[3].is_empty() { None } else { Some(parse_f64(&r[3], "metric")?) },
                    best: int(&r[4])? == 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace { metric, points })
    }

    /// The config marked best at each step.
    pub fn choices(&self) -> Vec<Option<usize>> {
        let steps = self.points.iter().map(|p| p.step + 1).max().unwrap_or(0);
        let mut out = vec![None; steps];
        for p in self.points.iter().filter(|p| p.best) {
            out[p.step] = Some(p.config_id);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(acc: &[f64], ent: &[f64]) -> Vec<LogRow> {
        let mut rows = Vec::new();
        let (mut sa, mut se) = (0.0, 0.0);
        for t in 0..acc.len() {
            sa += acc[t];
            se += ent[t];
            let n = (t + 1) as f64;
            rows.push(LogRow {
                t,
                domain: "d".into(),
                samples: 4,
                batch_accuracy: acc[t],
                loss: None,
                reset: false,
                entropy: ent[t],
                consistency: 0.0,
                snd: None,
                cum_accuracy: sa / n,
                cum_entropy: se / n,
                cum_consistency: 0.0,
                cum_snd: None,
            });
        }
        rows
    }

    #[test]
    fn best_config_switches_when_cumulative_entropy_crosses() {
        // cumulative entropies: a = 1.0, 1.0, 1.0, 1.0; b = 2.0, 1.25, 1.0, 0.875
        let a = log(&[0.5; 4], &[1.0; 4]);
        let b = log(&[0.25, 0.5, 0.75, 1.0], &[2.0, 0.5, 0.5, 0.5]);
        let trace = online_trace(&[(3, b), (1, a)], Metric::Entropy).unwrap();
        assert_eq!(trace.choices(), vec![Some(1), Some(1), Some(1), Some(3)]);
        let csv = trace.to_csv().unwrap();
        assert_eq!(Trace::from_csv(&csv).unwrap().to_csv().unwrap(), csv);
        let oracle = online_trace(&[(1, log(&[0.5; 2], &[1.0; 2])), (2, log(&[0.5, 0.7], &[1.0; 2]))], Metric::Accuracy).unwrap();
        assert_eq!(oracle.choices(), vec![Some(1), Some(2)]);
    }

    #[test]
    fn snd_without_values_is_not_eligible() {
        let a = log(&[0.5], &[1.0]);
        let trace = online_trace(&[(0, a)], Metric::Snd).unwrap();
        assert_eq!(trace.choices(), vec![None]);
        assert!(Trace::from_csv(&trace.to_csv().unwrap()).unwrap().points[0].cum_metric.is_none());
    }

    #[test]
    fn unequal_logs_are_rejected() {
        let err = online_trace(&[(0, log(&[0.5], &[1.0])), (1, log(&[0.5; 2], &[1.0; 2]))], Metric::Entropy);
        assert!(err.is_err());
    }
}
