//! Labeled corpora: a procedural desk-scale image generator with synthetic
//! corruptions, and adapters for on-disk image manifests and precomputed
//! feature tables.

mod loaders;
mod synthetic;

pub use loaders::{load_feature_domain, load_manifest_domain, parse_manifest};
pub use synthetic::{Corruption, SyntheticSpec};

use ndarray::{Axis, Array4};

use crate::model::Images;

/// One domain's samples and labels.
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub images: Images,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy out the samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Images {
        self.images.select(Axis(0), indices)
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Domain {
        Domain {
            name: name.into(),
            images: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

/// A set of target domains sharing a label space.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub num_classes: usize,
    pub domains: Vec<Domain>,
}

impl LabeledCorpus {
    pub fn domain(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }
}

/// Labeled source-domain data: a pool for training and subset draws, and a
/// held-out validation set.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: Domain,
    pub validation: Domain,
}

pub(crate) fn empty_images(shape: [usize; 3]) -> Images {
    Array4::zeros((0, shape[0], shape[1], shape[2]))
}
