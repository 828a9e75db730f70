//! One adaptation step's worth of samples. Labels travel with the batch for
//! logging but can only be read through a [`LabelAccess`] capability, which
//! adaptation methods and unsupervised metrics never receive.

use crate::model::Images;

/// Capability to read ground-truth labels. Only evaluation paths inside the
/// crate (oracle accuracy, probe accuracy, reports) can construct one.
#[derive(Debug)]
pub struct LabelAccess(());

impl LabelAccess {
    pub(crate) fn grant() -> Self {
        LabelAccess(())
    }
}

/// Labels hidden behind [`LabelAccess`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn reveal(&self, _access: &LabelAccess) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    samples: Images,
    labels: HiddenLabels,
    /// Corpus-level sample identifiers, stable across stream repetitions.
    pub sample_ids: Vec<usize>,
    /// Position of the first sample of this batch in the stream.
    pub offset: usize,
    pub step: usize,
    pub domain: usize,
}

impl Batch {
    pub fn new(samples: Images, labels: Vec<usize>, sample_ids: Vec<usize>, offset: usize, step: usize, domain: usize) -> Self {
        assert_eq!(samples.shape()[0], labels.len(), "one label per sample");
        assert_eq!(sample_ids.len(), labels.len(), "one id per sample");
        Self {
            samples,
            labels: HiddenLabels::new(labels),
            sample_ids,
            offset,
            step,
            domain,
        }
    }

    pub fn samples(&self) -> &Images {
        &self.samples
    }

    pub fn labels(&self) -> &HiddenLabels {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A label-derived value (such as accuracy on the target stream) that only
/// evaluation paths may read.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Guarded<T>(T);

impl<T> Guarded<T> {
    pub fn new(value: T) -> Self {
        Guarded(value)
    }

    pub fn reveal(&self, _access: &LabelAccess) -> &T {
        &self.0
    }
}
