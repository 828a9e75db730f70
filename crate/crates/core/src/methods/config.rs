use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::MethodKind;
use crate::error::{Error, Result};
use crate::rng::derived_rng;

/// One hyperparameter configuration. Fields a method does not read keep
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperparamConfig {
    pub config_id: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Entropy threshold factor `E0`; the threshold is `E0 * ln C`.
    pub entropy_factor: f64,
    /// SAR reset threshold `e0` on the EMA of the entropy loss.
    pub reset_threshold: f64,
    /// EATA redundancy threshold `epsilon` on cosine similarity.
    pub redundancy_threshold: f64,
    /// EATA Fisher regularization weight `beta`.
    pub fisher_weight: f64,
    pub memo_augs: usize,
    pub lame_k: usize,
    pub queue_size: usize,
    pub use_prototypes: bool,
}

impl Default for HyperparamConfig {
    fn default() -> Self {
        Self {
            config_id: 0,
            lr: 0.00025,
            momentum: 0.9,
            batch_size: 10,
            entropy_factor: 0.4,
            reset_threshold: 0.2,
            redundancy_threshold: 0.05,
            fisher_weight: 2000.0,
            memo_augs: 8,
            lame_k: 5,
            queue_size: 256,
            use_prototypes: true,
        }
    }
}

impl HyperparamConfig {
    pub fn validate(&self, kind: MethodKind) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(format!("{kind}: {m}")));
        if kind != MethodKind::Lame {
            if !(self.lr >= 0.0 && self.lr.is_finite()) {
                return bad(format!("lr must be non-negative, got {}", self.lr));
            }
            if !(0.0..1.0).contains(&self.momentum) {
                return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        match kind {
            MethodKind::Eata | MethodKind::Sar if !(self.entropy_factor > 0.0) => {
                bad("entropy_factor must be positive".into())
            }
            MethodKind::Eata if !(self.fisher_weight >= 0.0) => bad("fisher_weight must be >= 0".into()),
            MethodKind::Memo if self.memo_augs == 0 => bad("memo_augs must be positive".into()),
            MethodKind::AdaContrast if self.queue_size == 0 => bad("queue_size must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Learning-rate × momentum grid shared by all gradient-based methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseGrid {
    pub learning_rates: Vec<f64>,
    pub momenta: Vec<f64>,
}

impl Default for BaseGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.001, 0.00025, 0.0000625, 0.0000156],
            momenta: vec![0.0, 0.9],
        }
    }
}

/// Random search over method-specific parameters for SAR and EATA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSearch {
    pub draws: usize,
    pub seed: u64,
    pub entropy_factors: Vec<f64>,
    pub reset_thresholds: Vec<f64>,
    pub redundancy_thresholds: Vec<f64>,
    pub fisher_weights: Vec<f64>,
}

impl Default for MethodSearch {
    fn default() -> Self {
        Self {
            draws: 8,
            seed: 2024,
            entropy_factors: vec![0.1, 0.4, 0.8],
            reset_thresholds: vec![0.01, 0.05, 0.2, 0.5],
            redundancy_thresholds: vec![0.05, 0.1, 0.4, 0.8],
            fisher_weights: vec![1.0, 1000.0, 2000.0, 5000.0],
        }
    }
}

/// Expand the configurations evaluated for `kind`. LAME gets a single
/// parameter-free configuration; SAR and EATA get the base grid followed by
/// `search.draws` distinct random draws from their method grids, each with
/// an (lr, momentum) pair from the base grid.
pub fn config_grid(
    kind: MethodKind,
    base: &BaseGrid,
    search: &MethodSearch,
    template: &HyperparamConfig,
) -> Vec<HyperparamConfig> {
    if kind == MethodKind::Lame {
        return vec![HyperparamConfig {
            config_id: 0,
            ..template.clone()
        }];
    }
    let mut out = Vec::new();
    for &lr in &base.learning_rates {
        for &momentum in &base.momenta {
            out.push(HyperparamConfig {
                config_id: out.len(),
                lr,
                momentum,
                ..template.clone()
            });
        }
    }
    let pairs: Vec<(f64, f64)> = base
        .learning_rates
        .iter()
        .flat_map(|&lr| base.momenta.iter().map(move |&m| (lr, m)))
        .collect();
    let mut candidates: Vec<HyperparamConfig> = Vec::new();
    match kind {
        MethodKind::Sar => {
            for &(lr, momentum) in &pairs {
                for &e in &search.entropy_factors {
                    for &r in &search.reset_thresholds {
                        candidates.push(HyperparamConfig {
                            lr,
                            momentum,
                            entropy_factor: e,
                            reset_threshold: r,
                            ..template.clone()
                        });
                    }
                }
            }
        }
        MethodKind::Eata => {
            for &(lr, momentum) in &pairs {
                for &e in &search.entropy_factors {
                    for &d in &search.redundancy_thresholds {
                        for &b in &search.fisher_weights {
                            candidates.push(HyperparamConfig {
                                lr,
                                momentum,
                                entropy_factor: e,
                                redundancy_threshold: d,
                                fisher_weight: b,
                                ..template.clone()
                            });
                        }
                    }
                }
            }
        }
        _ => return out,
    }
    candidates.retain(|c| !out.iter().any(|b| same_params(b, c)));
    let mut rng = derived_rng(search.seed, &["method-search", kind.name()]);
    candidates.shuffle(&mut rng);
    for mut c in candidates.into_iter().take(search.draws) {
        c.config_id = out.len();
        out.push(c);
    }
    out
}

fn same_params(a: &HyperparamConfig, b: &HyperparamConfig) -> bool {
    HyperparamConfig { config_id: 0, ..a.clone() } == HyperparamConfig { config_id: 0, ..b.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinalities() {
        let base = BaseGrid::default();
        let search = MethodSearch::default();
        let t = HyperparamConfig::default();
        for kind in MethodKind::ALL {
            let n = config_grid(kind, &base, &search, &t).len();
            let expected = match kind {
                MethodKind::Sar | MethodKind::Eata => 16,
                MethodKind::Lame => 1,
                _ => 8,
            };
            assert_eq!(n, expected, "{kind}");
        }
    }

    #[test]
    fn search_draws_are_distinct_and_seeded() {
        let base = BaseGrid::default();
        let search = MethodSearch::default();
        let t = HyperparamConfig::default();
        let a = config_grid(MethodKind::Eata, &base, &search, &t);
        let b = config_grid(MethodKind::Eata, &base, &search, &t);
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert_eq!(a[i].config_id, i);
            for j in 0..i {
                assert!(!same_params(&a[i], &a[j]));
            }
        }
        let other = config_grid(MethodKind::Eata, &base, &MethodSearch { seed: 1, ..search }, &t);
        assert_ne!(a[8..], other[8..]);
    }

    #[test]
    fn base_grid_values() {
        let g = config_grid(MethodKind::Tent, &BaseGrid::default(), &MethodSearch::default(), &HyperparamConfig::default());
        assert_eq!((g[0].lr, g[0].momentum), (0.001, 0.0));
        assert_eq!((g[7].lr, g[7].momentum), (0.0000156, 0.9));
    }
}
