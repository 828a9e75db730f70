//! Ordered evaluation streams: domain sequences, Dirichlet temporal class
//! correlation, long repetition, the labeled probe and source-side subsets.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::batch::{Batch, HiddenLabels, LabelAccess};
use crate::data::{Domain, LabeledCorpus, SourceData};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from, Rng};

/// Dirichlet concentration. `Infinite` means an i.i.d. uniform shuffle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    Finite(f64),
    Infinite,
}

impl Serialize for Concentration {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Concentration::Finite(v) => s.serialize_f64(*v),
            Concentration::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Concentration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v.is_infinite() && v > 0.0 => Ok(Concentration::Infinite),
            Repr::Num(v) => Ok(Concentration::Finite(v)),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "iid") => Ok(Concentration::Infinite),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid concentration `{t}`"))),
        }
    }
}

fn default_repeat() -> usize {
    1
}

fn default_delta() -> Concentration {
    Concentration::Infinite
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub dataset_id: String,
    pub domains: Vec<String>,
    pub batch_size: usize,
    #[serde(default = "default_delta")]
    pub dirichlet_delta: Concentration,
    #[serde(default = "default_repeat")]
    pub repeat_factor: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dirichlet slot count per domain; defaults to one slot per batch.
    #[serde(default)]
    pub num_slots: Option<usize>,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::invalid("stream needs at least one domain"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.repeat_factor == 0 {
            return Err(Error::invalid("repeat_factor must be positive"));
        }
        if let Concentration::Finite(d) = self.dirichlet_delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("dirichlet_delta must be positive, got {d}")));
            }
        }
        if self.num_slots == Some(0) {
            return Err(Error::invalid("num_slots must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    domain: usize,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSlice {
    pub start: usize,
    pub end: usize,
    pub domain: usize,
}

/// A fully ordered stream of corpus sample references, cut into batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    entries: Vec<Entry>,
    batches: Vec<BatchSlice>,
    domain_offsets: Vec<usize>,
    pub domain_names: Vec<String>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_slices(&self) -> &[BatchSlice] {
        &self.batches
    }

    /// Corpus-level sample ids in stream order.
    pub fn sample_ids(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.domain_offsets[e.domain] + e.index)
            .collect()
    }

    pub(crate) fn label_at(&self, corpus: &LabeledCorpus, position: usize) -> usize {
        let e = self.entries[position];
        corpus.domains[e.domain].labels[e.index]
    }

    /// Labels in stream order (evaluation paths only).
    pub fn labels(&self, corpus: &LabeledCorpus, _access: &LabelAccess) -> Vec<usize> {
        (0..self.len()).map(|p| self.label_at(corpus, p)).collect()
    }

    pub fn batch(&self, corpus: &LabeledCorpus, t: usize) -> Batch {
        let slice = self.batches[t];
        let domain = &corpus.domains[slice.domain];
        let idx: Vec<usize> = self.entries[slice.start..slice.end].iter().map(|e| e.index).collect();
        let samples = domain.images.select(Axis(0), &idx);
        let labels = idx.iter().map(|&i| domain.labels[i]).collect();
        let ids = idx.iter().map(|&i| self.domain_offsets[slice.domain] + i).collect();
        Batch::new(samples, labels, ids, slice.start, t, slice.domain)
    }

    pub fn iter<'a>(&'a self, corpus: &'a LabeledCorpus) -> impl Iterator<Item = Batch> + 'a {
        (0..self.num_batches()).map(move |t| self.batch(corpus, t))
    }
}

/// Order each domain's samples and cut them into batches, repeating the
/// whole domain sequence `repeat_factor` times. Domains stay contiguous and
/// batches never straddle a domain boundary; the final partial batch of a
/// domain is kept.
pub fn build_stream(spec: &StreamSpec, corpus: &LabeledCorpus) -> Result<Stream> {
    spec.validate()?;
    let mut domain_ids = Vec::with_capacity(spec.domains.len());
    for name in &spec.domains {
        domain_ids.push(corpus.domain_index(name).ok_or_else(|| Error::MissingDomain(name.clone()))?);
    }
    let mut domain_offsets = Vec::with_capacity(corpus.domains.len());
    let mut acc = 0;
    for d in &corpus.domains {
        domain_offsets.push(acc);
        acc += d.len();
    }
    let mut entries = Vec::new();
    let mut batches = Vec::new();
    for rep in 0..spec.repeat_factor {
        for (pos, &di) in domain_ids.iter().enumerate() {
            let domain = &corpus.domains[di];
            let seed = crate::rng::derive_seed(spec.seed, &["stream", &rep.to_string(), &pos.to_string(), &domain.name]);
            let order = match spec.dirichlet_delta {
                Concentration::Infinite => {
                    let mut v: Vec<usize> = (0..domain.len()).collect();
                    v.shuffle(&mut rng_from(seed));
                    v
                }
                Concentration::Finite(delta) => {
                    let slots = spec.num_slots.unwrap_or_else(|| domain.len().div_ceil(spec.batch_size)).max(1);
                    dirichlet_order(&domain.labels, delta, slots, seed)?
                }
            };
            let start = entries.len();
            entries.extend(order.into_iter().map(|index| Entry { domain: di, index }));
            let mut s = start;
            while s < entries.len() {
                let e = (s + spec.batch_size).min(entries.len());
                batches.push(BatchSlice { start: s, end: e, domain: di });
                s = e;
            }
        }
    }
    Ok(Stream {
        entries,
        batches,
        domain_offsets,
        domain_names: corpus.domains.iter().map(|d| d.name.clone()).collect(),
    })
}

/// Log of a Gamma(shape, 1) draw, stable for very small shapes via
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)`.
fn log_gamma_draw(shape: f64, rng: &mut Rng) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("valid shape").sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("valid shape").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    }
}

/// Symmetric Dirichlet(`delta`) draw over `k` categories.
pub fn sample_dirichlet(delta: f64, k: usize, rng: &mut Rng) -> Vec<f64> {
    let logs: Vec<f64> = (0..k).map(|_| log_gamma_draw(delta, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u = rng.random::<f64>();
    let mut c = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        c += pi;
        if u < c {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Temporally correlated ordering: for every class, a Dirichlet draw over
/// `num_slots` slots distributes its instances multinomially; each slot is
/// shuffled and the slots are concatenated.
pub fn dirichlet_order(labels: &[usize], delta: f64, num_slots: usize, seed: u64) -> Result<Vec<usize>> {
    if !(delta > 0.0) || delta.is_nan() {
        return Err(Error::invalid(format!("dirichlet delta must be positive, got {delta}")));
    }
    if num_slots == 0 {
        return Err(Error::invalid("num_slots must be at least 1"));
    }
    let mut rng = rng_from(seed);
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut slots = vec![Vec::new(); num_slots];
    for members in &by_class {
        if members.is_empty() {
            continue;
        }
        let p = sample_dirichlet(delta, num_slots, &mut rng);
        for &i in members {
            slots[categorical(&p, &mut rng)].push(i);
        }
    }
    let mut out = Vec::with_capacity(labels.len());
    for mut slot in slots {
        slot.shuffle(&mut rng);
        out.extend(slot);
    }
    Ok(out)
}

/// Mean length of maximal runs of equal consecutive labels.
pub fn mean_run_length(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let runs = 1 + labels.windows(2).filter(|w| w[0] != w[1]).count();
    labels.len() as f64 / runs as f64
}

/// Stream positions with their labels, for the 100-label selection strategy.
#[derive(Debug, Clone)]
pub struct LabeledProbe {
    pub positions: Vec<usize>,
    labels: HiddenLabels,
}

impl LabeledProbe {
    pub fn labels(&self) -> &HiddenLabels {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Draw `n` stream positions uniformly without replacement (sorted).
pub fn sample_probe(stream: &Stream, corpus: &LabeledCorpus, n: usize, seed: u64) -> Result<LabeledProbe> {
    if n > stream.len() {
        return Err(Error::invalid(format!("probe of {n} exceeds stream length {}", stream.len())));
    }
    let mut rng = derived_rng(seed, &["probe"]);
    let mut positions = rand::seq::index::sample(&mut rng, stream.len(), n).into_vec();
    positions.sort_unstable();
    let labels = positions.iter().map(|&p| stream.label_at(corpus, p)).collect();
    Ok(LabeledProbe {
        positions,
        labels: HiddenLabels::new(labels),
    })
}

/// Source-side data used by methods and by source-accuracy selection.
#[derive(Debug, Clone)]
pub struct SourceSplit {
    pub validation: Domain,
    pub fisher: Domain,
    pub prototypes: Domain,
}

pub const FISHER_BUDGET: usize = 2000;
pub const PROTOTYPE_FRACTION: f64 = 0.1;

impl SourceSplit {
    /// Draw the Fisher subset (exactly `fisher_budget` samples) and the
    /// prototype subset (`round(fraction * |train|)` samples) from the
    /// source training pool.
    pub fn new(source: &SourceData, fisher_budget: usize, prototype_fraction: f64, seed: u64) -> Result<Self> {
        let pool = source.train.len();
        if fisher_budget > pool {
            return Err(Error::invalid(format!(
                "Fisher budget {fisher_budget} exceeds source pool of {pool}"
            )));
        }
        if !(prototype_fraction > 0.0 && prototype_fraction <= 1.0) {
            return Err(Error::invalid("prototype fraction must be in (0, 1]"));
        }
        let proto_n = ((prototype_fraction * pool as f64).round() as usize).max(1);
        let mut rng = derived_rng(seed, &["source-split", "fisher"]);
        let fisher_idx = rand::seq::index::sample(&mut rng, pool, fisher_budget).into_vec();
        let mut rng = derived_rng(seed, &["source-split", "prototypes"]);
        let proto_idx = rand::seq::index::sample(&mut rng, pool, proto_n).into_vec();
        Ok(Self {
            validation: source.validation.clone(),
            fisher: source.train.subset("fisher", &fisher_idx),
            prototypes: source.train.subset("prototypes", &proto_idx),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn corpus(domains: &[(&str, usize)], classes: usize) -> LabeledCorpus {
        LabeledCorpus {
            num_classes: classes,
            domains: domains
                .iter()
                .map(|(name, n)| Domain {
                    name: name.to_string(),
                    images: Array4::from_shape_fn((*n, 1, 1, 1), |(i, _, _, _)| i as f64),
                    labels: (0..*n).map(|i| i % classes).collect(),
                })
                .collect(),
        }
    }

    fn spec(domains: &[&str], b: usize) -> StreamSpec {
        StreamSpec {
            dataset_id: "toy".into(),
            domains: domains.iter().map(|s| s.to_string()).collect(),
            batch_size: b,
            dirichlet_delta: Concentration::Infinite,
            repeat_factor: 1,
            seed: 1,
            num_slots: None,
        }
    }

    #[test]
    fn iid_stream_bookkeeping() {
        let c = corpus(&[("a", 100), ("b", 100)], 10);
        let s = build_stream(&spec(&["a", "b"], 10), &c).unwrap();
        assert_eq!(s.num_batches(), 20);
        let doms: Vec<usize> = s.batch_slices().iter().map(|b| b.domain).collect();
        assert!(doms[..10].iter().all(|&d| d == 0) && doms[10..].iter().all(|&d| d == 1));
        let batch = s.batch(&c, 3);
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.offset, 30);
    }

    #[test]
    fn final_partial_batch_is_kept() {
        let c = corpus(&[("a", 25)], 5);
        let s = build_stream(&spec(&["a"], 10), &c).unwrap();
        let sizes: Vec<usize> = s.batch_slices().iter().map(|b| b.end - b.start).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
    }

    #[test]
    fn repetition_contract() {
        let c = corpus(&[("a", 1000)], 10);
        let mut sp = spec(&["a"], 10);
        sp.repeat_factor = 10;
        let s = build_stream(&sp, &c).unwrap();
        assert_eq!(s.len(), 10000);
        let mut counts = vec![0; 1000];
        for id in s.sample_ids() {
            counts[id] += 1;
        }
        assert!(counts.iter().all(|&n| n == 10));
    }

    #[test]
    fn streams_are_deterministic() {
        let c = corpus(&[("a", 300)], 10);
        let mut sp = spec(&["a"], 10);
        sp.dirichlet_delta = Concentration::Finite(0.1);
        assert_eq!(build_stream(&sp, &c).unwrap(), build_stream(&sp, &c).unwrap());
        sp.seed = 2;
        let other = build_stream(&sp, &c).unwrap();
        sp.seed = 1;
        assert_ne!(build_stream(&sp, &c).unwrap().sample_ids(), other.sample_ids());
    }

    #[test]
    fn missing_domain_rejected() {
        let c = corpus(&[("a", 10)], 2);
        assert!(matches!(build_stream(&spec(&["zzz"], 2), &c), Err(Error::MissingDomain(d)) if d == "zzz"));
    }

    #[test]
    fn single_slot_is_one_shuffle() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let order = dirichlet_order(&labels, 0.01, 1, 9).unwrap();
        let mut expected: Vec<usize> = Vec::new();
        // all instances land in the single slot in class order, then one shuffle
        for c in 0..5 {
            expected.extend((0..50).filter(|i| i % 5 == c));
        }
        let mut rng = rng_from(9);
        // consume the Dirichlet and categorical draws the sampler made
        for _ in 0..5 {
            let _ = sample_dirichlet(0.01, 1, &mut rng);
            for _ in 0..10 {
                let _ = rng.random::<f64>();
            }
        }
        expected.shuffle(&mut rng);
        assert_eq!(order, expected);
    }

    #[test]
    fn non_positive_delta_rejected() {
        assert!(dirichlet_order(&[0, 1], 0.0, 2, 0).is_err());
        assert!(dirichlet_order(&[0, 1], -1.0, 2, 0).is_err());
        assert!(dirichlet_order(&[0, 1], 1.0, 0, 0).is_err());
    }

    #[test]
    fn tiny_delta_dirichlet_is_finite_simplex() {
        let mut rng = rng_from(3);
        for _ in 0..100 {
            let p = sample_dirichlet(0.01, 50, &mut rng);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_edge_cases() {
        let c = corpus(&[("a", 40)], 4);
        let s = build_stream(&spec(&["a"], 8), &c).unwrap();
        let all = sample_probe(&s, &c, 40, 5).unwrap();
        assert_eq!(all.positions, (0..40).collect::<Vec<_>>());
        assert!(sample_probe(&s, &c, 0, 5).unwrap().is_empty());
        assert_eq!(sample_probe(&s, &c, 7, 5).unwrap().positions, sample_probe(&s, &c, 7, 5).unwrap().positions);
        assert!(sample_probe(&s, &c, 41, 5).is_err());
    }

    #[test]
    fn run_length() {
        assert_eq!(mean_run_length(&[1, 1, 2, 2, 2, 1]), 2.0);
        assert_eq!(mean_run_length(&[3]), 1.0);
    }

    #[test]
    fn concentration_parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            d: Concentration,
        }
        let w: W = toml::from_str("d = \"inf\"").unwrap();
        assert_eq!(w.d, Concentration::Infinite);
        let w: W = toml::from_str("d = 0.1").unwrap();
        assert_eq!(w.d, Concentration::Finite(0.1));
    }
}
