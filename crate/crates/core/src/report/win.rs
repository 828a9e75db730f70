use super::{csv_bytes, csv_records, parse_strategy, OutcomeTable, SOURCE};
use crate::error::{Error, Result};
use crate::selection::Strategy;

/// `counts[i][j]`: cells where strategy `i` chose a config at least as
/// accurate as strategy `j`. Ties count for both; the diagonal equals the
/// number of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct WinMatrix {
    pub strategies: Vec<Strategy>,
    pub counts: Vec<Vec<usize>>,
    pub cells: usize,
}

/// Compare strategies over (experiment, method) cells. Without an explicit
/// cell list every adapting method is used; LAME and the source model have
/// nothing to select and are left out.
pub fn win_matrix(
    table: &OutcomeTable,
    strategies: &[Strategy],
    cells: Option<&[(String, String)]>,
) -> Result<WinMatrix> {
    let cells: Vec<(String, String)> = match cells {
        Some(c) => c.to_vec(),
        None => {
            let mut out = Vec::new();
            for e in table.experiments() {
                for m in table.methods() {
                    if m == "lame" || m == SOURCE {
                        continue;
                    }
                    if table.rows.iter().any(|r| r.experiment == e && r.method == m) {
                        out.push((e.clone(), m));
                    }
                }
            }
            out
        }
    };
    let k = strategies.len();
    let mut counts = vec![vec![0usize; k]; k];
    for (e, m) in &cells {
        let acc = strategies
            .iter()
            .map(|&s| {
                table.get(e, m, s).map(|r| r.accuracy).ok_or_else(|| {
                    Error::Report(format!("strategy {s} has no result for {m} on {e}"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        for i in 0..k {
            for j in 0..k {
                if acc[i] >= acc[j] {
                    counts[i][j] += 1;
                }
            }
        }
    }
    Ok(WinMatrix {
        strategies: strategies.to_vec(),
        counts,
        cells: cells.len(),
    })
}

impl WinMatrix {
    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec!["strategy".to_string()];
        header.extend(self.strategies.iter().map(|s| s.name().to_string()));
        let rows: Vec<Vec<String>> = self
            .strategies
            .iter()
            .zip(&self.counts)
            .map(|(s, row)| {
                let mut r = vec![s.name().to_string()];
                r.extend(row.iter().map(|c| c.to_string()));
                r
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, recs) = csv_records(text)?;
        let strategies = header.iter().skip(1).map(|s| parse_strategy(s)).collect::<Result<Vec<_>>>()?;
        if recs.len() != strategies.len() {
            return Err(Error::Report("win matrix must be square".into()));
        }
        let mut counts = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            if r.len() != strategies.len() + 1 || parse_strategy(&r[0])? != strategies[i] {
                return Err(Error::Report(format!("win matrix row {i} is malformed")));
            }
            counts.push(
                r[1..]
                    .iter()
                    .map(|c| c.parse().map_err(|_| Error::Report(format!("bad count {c:?}"))))
                    .collect::<Result<Vec<usize>>>()?,
            );
        }
        let cells = counts.first().map(|r| r[0]).unwrap_or(0);
        Ok(WinMatrix { strategies, counts, cells })
    }

    pub fn get(&self, a: Strategy, b: Strategy) -> Option<usize> {
        let i = self.strategies.iter().position(|&s| s == a)?;
        let j = self.strategies.iter().position(|&s| s == b)?;
        Some(self.counts[i][j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::OutcomeRow;

    fn row(e: &str, s: Strategy, acc: f64) -> OutcomeRow {
        OutcomeRow {
            experiment: e.into(),
            method: "tent".into(),
            strategy: s,
            accuracy: acc,
            std: 0.0,
            gap: 0.0,
            relative_gap: 0.0,
        }
    }

    #[test]
    fn ties_count_for_both() {
        let (a, b) = (Strategy::Entropy, Strategy::Snd);
        let t = OutcomeTable {
            rows: vec![row("x", a, 60.0), row("x", b, 55.0), row("y", a, 50.0), row("y", b, 50.0)],
        };
        let w = win_matrix(&t, &[a, b], None).unwrap();
        assert_eq!(w.get(a, b), Some(2));
        assert_eq!(w.get(b, a), Some(1));
        assert_eq!(w.get(a, a), Some(2));
        let csv = w.to_csv().unwrap();
        assert_eq!(WinMatrix::from_csv(&csv).unwrap(), w);
    }

    #[test]
    fn missing_strategy_is_named() {
        let t = OutcomeTable {
            rows: vec![row("x", Strategy::Entropy, 60.0)],
        };
        let err = win_matrix(&t, &[Strategy::Entropy, Strategy::Median], None).unwrap_err();
        assert!(err.to_string().contains("MED"));
    }
}
