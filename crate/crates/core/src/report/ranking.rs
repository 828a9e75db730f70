use super::{csv_bytes, csv_records, parse_strategy, OutcomeTable};
use crate::error::{Error, Result};
use crate::selection::Strategy;

/// Mean rank of each method under each strategy across experiments. Rank 1
/// is the most accurate; tied methods share the average of their ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub strategies: Vec<Strategy>,
    pub methods: Vec<String>,
    /// `ranks[method][strategy]`.
    pub ranks: Vec<Vec<f64>>,
}

/// Average ranks of `values`, 1 for the largest.
pub(crate) fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Methods default to all in the table. Rows are ordered by mean ORACLE
/// rank when ORACLE is among the strategies, otherwise by the first one.
pub fn ranking_table(table: &OutcomeTable, strategies: &[Strategy], methods: Option<&[String]>) -> Result<RankingTable> {
    if strategies.is_empty() {
        return Err(Error::Report("ranking needs at least one strategy".into()));
    }
    let methods: Vec<String> = methods.map(<[String]>::to_vec).unwrap_or_else(|| table.methods());
    let mut sums = vec![vec![0.0; strategies.len()]; methods.len()];
    let mut counts = vec![vec![0usize; strategies.len()]; methods.len()];
    for e in table.experiments() {
        let present: Vec<usize> = (0..methods.len())
            .filter(|&m| table.rows.iter().any(|r| r.experiment == e && r.method == methods[m]))
            .collect();
        for (si, &s) in strategies.iter().enumerate() {
            let acc = present
                .iter()
                .map(|&m| {
                    table.get(&e, &methods[m], s).map(|r| r.accuracy).ok_or_else(|| {
                        Error::Report(format!("strategy {s} has no result for {} on {e}", methods[m]))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            for (k, r) in descending_ranks(&acc).into_iter().enumerate() {
                sums[present[k]][si] += r;
                counts[present[k]][si] += 1;
            }
        }
    }
    let mut rows: Vec<(String, Vec<f64>)> = methods
        .into_iter()
        .enumerate()
        .filter(|(m, _)| counts[*m][0] > 0)
        .map(|(m, name)| {
            let r = (0..strategies.len()).map(|s| sums[m][s] / counts[m][s] as f64).collect();
            (name, r)
        })
        .collect();
    let key = strategies.iter().position(|&s| s == Strategy::Oracle).unwrap_or(0);
    rows.sort_by(|a, b| a.1[key].total_cmp(&b.1[key]).then_with(|| a.0.cmp(&b.0)));
    Ok(RankingTable {
        strategies: strategies.to_vec(),
        methods: rows.iter().map(|r| r.0.clone()).collect(),
        ranks: rows.into_iter().map(|r| r.1).collect(),
    })
}

impl RankingTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec!["method".to_string()];
        header.extend(self.strategies.iter().map(|s| s.name().to_string()));
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .zip(&self.ranks)
            .map(|(m, r)| {
                let mut row = vec![m.clone()];
                row.extend(r.iter().map(|v| format!("{v:.4}")));
                row
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, recs) = csv_records(text)?;
        let strategies = header.iter().skip(1).map(|s| parse_strategy(s)).collect::<Result<Vec<_>>>()?;
        let mut methods = Vec::new();
        let mut ranks = Vec::new();
        for r in recs {
            if r.len() != strategies.len() + 1 {
                return Err(Error::Report("ranking row has the wrong width".into()));
            }
            methods.push(r[0].clone());
            ranks.push(
                r[1..]
                    .iter()
                    .map(|v| v.parse().map_err(|_| Error::Report(format!("bad rank {v:?}"))))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        Ok(RankingTable { strategies, methods, ranks })
    }

    pub fn rank(&self, method: &str, strategy: Strategy) -> Option<f64> {
        let m = self.methods.iter().position(|x| x == method)?;
        let s = self.strategies.iter().position(|&x| x == strategy)?;
        Some(self.ranks[m][s])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::OutcomeRow;

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(descending_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn ranks_average_over_experiments() {
        let row = |e: &str, m: &str, acc: f64| OutcomeRow {
            experiment: e.into(),
            method: m.into(),
            strategy: Strategy::Oracle,
            accuracy: acc,
            std: 0.0,
            gap: 0.0,
            relative_gap: 0.0,
        };
        let t = OutcomeTable {
            rows: vec![row("x", "tent", 70.0), row("x", "sar", 60.0), row("y", "tent", 50.0), row("y", "sar", 50.0)],
        };
        let r = ranking_table(&t, &[Strategy::Oracle], None).unwrap();
        assert_eq!(r.rank("tent", Strategy::Oracle), Some(1.25));
        assert_eq!(r.rank("sar", Strategy::Oracle), Some(1.75));
        assert_eq!(r.methods, vec!["tent", "sar"]);
        let csv = r.to_csv().unwrap();
        assert_eq!(RankingTable::from_csv(&csv).unwrap().to_csv().unwrap(), csv);
    }
}
