use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_feature_domain, load_manifest_domain, Domain, LabeledCorpus, SourceData, SyntheticSpec};
use crate::error::{Error, Result};
use crate::methods::{config_grid, BaseGrid, HyperparamConfig, MethodKind, MethodSearch};
use crate::metrics::SND_TEMPERATURE;
use crate::model::to_hex;
use crate::model::Architecture;
use crate::streams::{StreamSpec, FISHER_BUDGET, PROTOTYPE_FRACTION};
use crate::train::TrainSettings;

pub const PLAN_VERSION: u32 = 1;

/// On-disk format of a file-backed corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    /// `relative_path<TAB>class_id` manifest of image files.
    Manifest,
    /// CSV rows `class,f1,...,fD`.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Files {
        format: FileFormat,
        num_classes: usize,
        #[serde(default)]
        source_train: Option<PathBuf>,
        #[serde(default)]
        source_validation: Option<PathBuf>,
        domains: BTreeMap<String, PathBuf>,
    },
}

impl DatasetSpec {
    fn load_file(format: FileFormat, name: &str, path: &Path) -> Result<Domain> {
        match format {
            FileFormat::Manifest => load_manifest_domain(name, path),
            FileFormat::Features => load_feature_domain(name, path),
        }
    }

    /// Target corpus holding `domains` in the given order.
    pub fn target(&self, domains: &[String], base: &Path) -> Result<LabeledCorpus> {
        match self {
            DatasetSpec::Synthetic(s) => s.target(domains),
            DatasetSpec::Files {
                format,
                num_classes,
                domains: files,
                ..
            } => {
                let loaded = domains
                    .iter()
                    .map(|name| {
                        let path = files.get(name).ok_or_else(|| Error::MissingDomain(name.clone()))?;
                        Self::load_file(*format, name, &base.join(path))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledCorpus {
                    num_classes: *num_classes,
                    domains: loaded,
                })
            }
        }
    }

    pub fn source(&self, base: &Path) -> Result<SourceData> {
        match self {
            DatasetSpec::Synthetic(s) => s.source(),
            DatasetSpec::Files {
                format,
                source_train,
                source_validation,
                ..
            } => {
                let (Some(train), Some(val)) = (source_train, source_validation) else {
                    return Err(Error::Plan("file datasets need source_train and source_validation".into()));
                };
                Ok(SourceData {
                    train: Self::load_file(*format, "source_train", &base.join(train))?,
                    validation: Self::load_file(*format, "source_validation", &base.join(val))?,
                })
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic(s) => s.num_classes,
            DatasetSpec::Files { num_classes, .. } => *num_classes,
        }
    }

    fn validate(&self, domains: &[String], needs_source: bool) -> Result<()> {
        match self {
            DatasetSpec::Synthetic(s) => {
                s.validate().map_err(|e| Error::Plan(e.to_string()))?;
                for d in domains {
                    if crate::data::Corruption::parse(d).is_none() {
                        return Err(Error::Plan(format!("unknown synthetic domain {d:?}")));
                    }
                }
            }
            DatasetSpec::Files {
                num_classes,
                source_train,
                source_validation,
                domains: files,
                ..
            } => {
                if *num_classes < 2 {
                    return Err(Error::Plan("num_classes must be at least 2".into()));
                }
                if needs_source && (source_train.is_none() || source_validation.is_none()) {
                    return Err(Error::Plan("file datasets need source_train and source_validation".into()));
                }
                for d in domains {
                    if !files.contains_key(d) {
                        return Err(Error::Plan(format!("domain {d:?} has no file entry")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Second dataset on which every config is also run, for cross-dataset
/// accuracy selection. It shares the source model of the main dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub dataset: DatasetSpec,
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureSpec {
    SmallConv { widths: [usize; 2] },
    Mlp { hidden: usize },
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec::SmallConv { widths: [8, 16] }
    }
}

impl ArchitectureSpec {
    pub fn build(&self, input: [usize; 3], num_classes: usize) -> Architecture {
        match *self {
            ArchitectureSpec::SmallConv { widths } => Architecture::small_conv(input, widths, num_classes),
            ArchitectureSpec::Mlp { hidden } => Architecture::mlp(input.iter().product(), hidden, num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: ArchitectureSpec,
    pub train: TrainSettings,
    /// Pretrained weights as a serialized model state; when set, no
    /// pretraining happens.
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub snd_temperature: f64,
    pub fisher_budget: usize,
    pub prototype_fraction: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            snd_temperature: SND_TEMPERATURE,
            fisher_budget: FISHER_BUDGET,
            prototype_fraction: PROTOTYPE_FRACTION,
        }
    }
}

fn default_repeats() -> usize {
    3
}

fn default_probe() -> usize {
    100
}

/// A complete experiment: methods, stream, grid, seeds and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub plan_version: u32,
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    pub stream: StreamSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub grid: BaseGrid,
    #[serde(default)]
    pub search: MethodSearch,
    #[serde(default)]
    pub hyperparams: HyperparamConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
}

/// One planned run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunUnit {
    pub method: MethodKind,
    pub config: HyperparamConfig,
    pub repeat: usize,
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan_version != PLAN_VERSION {
            return Err(Error::Plan(format!(
                "unsupported plan_version {}, expected {PLAN_VERSION}",
                self.plan_version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Plan("no methods listed".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Plan("repeats must be positive".into()));
        }
        self.stream.validate().map_err(|e| Error::Plan(e.to_string()))?;
        self.dataset.validate(&self.stream.domains, self.model.weights.is_none())?;
        if let Some(r) = &self.reference {
            if r.domains.is_empty() {
                return Err(Error::Plan("reference dataset lists no domains".into()));
            }
            r.dataset.validate(&r.domains, false)?;
            if r.dataset.num_classes() != self.dataset.num_classes() {
                return Err(Error::Plan("reference dataset has a different class count".into()));
            }
        }
        if self.grid.learning_rates.is_empty() || self.grid.momenta.is_empty() {
            return Err(Error::Plan("base grid must list learning rates and momenta".into()));
        }
        if !(self.metrics.snd_temperature > 0.0) {
            return Err(Error::Plan("snd_temperature must be positive".into()));
        }
        self.model.train.validate()?;
        for unit in self.units() {
            unit.config.validate(unit.method)?;
        }
        Ok(())
    }

    /// Configurations of one method, with the stream's batch size.
    pub fn configs(&self, kind: MethodKind) -> Vec<HyperparamConfig> {
        let template = HyperparamConfig {
            batch_size: self.stream.batch_size,
            ..self.hyperparams.clone()
        };
        config_grid(kind, &self.grid, &self.search, &template)
    }

    /// Every run of the plan, method-major then config then repeat.
    pub fn units(&self) -> Vec<RunUnit> {
        let mut out = Vec::new();
        let mut seen = Vec::new();
        for &method in &self.methods {
            if seen.contains(&method) {
                continue;
            }
            seen.push(method);
            for config in self.configs(method) {
                for repeat in 0..self.repeats {
                    out.push(RunUnit {
                        method,
                        config: config.clone(),
                        repeat,
                    });
                }
            }
        }
        out
    }

    /// Stable identifier of everything that influences results.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        to_hex(&Sha256::digest(&json)[..8])
    }
}
