use std::path::Path;
use std::time::Instant;

use crate::augment::AugmentationPipeline;
use crate::batch::{Guarded, LabelAccess};
use crate::data::{Domain, LabeledCorpus};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::methods::{build_method, compute_prototypes, estimate_fisher, MethodResources, TtaMethod};
use crate::metrics::{accuracy, mean_entropy, mean_symmetric_kl, snd_score, Metric, MetricAccumulator};
use crate::model::{to_hex, AdaptableModel, ModelState, NormMode};
use crate::prob::softmax_rows;
use crate::rng::derive_seed;
use crate::streams::{build_stream, sample_probe, LabeledProbe, SourceSplit, Stream, StreamSpec};
use crate::train::{evaluate, predict, pretrain};

use super::store::{encode_log, log_digest, Baseline, LogRow, ResultsStore, RunRecord, RunSummary};
use super::{ExperimentPlan, RunUnit};

/// Per-repeat stream material.
#[derive(Debug, Clone)]
pub struct RepeatData {
    pub stream: Stream,
    pub reference_stream: Option<Stream>,
    pub probe: LabeledProbe,
}

/// A plan with its data loaded, its source model ready and its streams
/// built: everything a run needs, shared read-only across runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plan: ExperimentPlan,
    pub hash: String,
    pub source: AdaptableModel,
    pub source_hash: String,
    pub validation: Option<Domain>,
    pub resources: MethodResources,
    pub corpus: LabeledCorpus,
    pub reference: Option<LabeledCorpus>,
    pub repeats: Vec<RepeatData>,
}

fn repeat_stream(spec: &StreamSpec, repeat: usize) -> StreamSpec {
    StreamSpec {
        seed: derive_seed(spec.seed, &["repeat", &repeat.to_string()]),
        ..spec.clone()
    }
}

impl Prepared {
    /// Load data and the source model. With a store, the pretrained source
    /// model is cached next to the plan's results.
    pub fn new(plan: &ExperimentPlan, base_dir: &Path, store: Option<&ResultsStore>) -> Result<Self> {
        plan.validate()?;
        let hash = plan.hash();
        let corpus = plan.dataset.target(&plan.stream.domains, base_dir)?;
        let shape = corpus
            .domains
            .first()
            .map(Domain::sample_shape)
            .ok_or_else(|| Error::Plan("stream has no domains".into()))?;
        let arch = plan.model.architecture.build(shape, corpus.num_classes);
        let has_source = !matches!(plan.dataset, super::DatasetSpec::Files { source_train: None, .. });
        let source_data = if has_source {
            Some(plan.dataset.source(base_dir)?)
        } else {
            None
        };

        let cached = store.map(|s| s.source_state_path(&hash));
        let weights = plan.model.weights.as_ref().map(|w| base_dir.join(w));
        let state_file = weights.clone().or(cached.clone().filter(|p| p.is_file()));
        let source = match state_file {
            Some(path) => {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let state = ModelState::from_bytes(&bytes)?;
                let mut m = AdaptableModel::new(arch, 0)?;
                m.restore(&state)?;
                m
            }
            None => {
                let data = source_data.as_ref().expect("source data present without weights");
                let m = pretrain(&arch, &data.train, &plan.model.train)?;
                if let (Some(store), Some(path)) = (store, &cached) {
                    store.write_bytes(path, &m.snapshot().to_bytes())?;
                }
                m
            }
        };
        let mut source = source;
        source.set_norm_mode(NormMode::UseRunning);
        source.clear_optimizer_slots();

        let mut resources = MethodResources::default();
        let mut validation = None;
        if let Some(data) = &source_data {
            let split = SourceSplit::new(
                data,
                plan.metrics.fisher_budget.min(data.train.len()),
                plan.metrics.prototype_fraction,
                derive_seed(plan.seed, &["source-split"]),
            )?;
            if plan.methods.iter().any(|m| m.requires_fisher()) {
                resources.fisher = Some(estimate_fisher(&source, &split.fisher.images, &split.fisher.labels)?);
            }
            if plan.methods.iter().any(|m| m.requires_prototypes()) && plan.hyperparams.use_prototypes {
                resources.prototypes = Some(compute_prototypes(&source, &split.prototypes.images, &split.prototypes.labels)?);
            }
            validation = Some(split.validation);
        }

        let reference = match &plan.reference {
            Some(r) => Some(r.dataset.target(&r.domains, base_dir)?),
            None => None,
        };
        let mut repeats = Vec::with_capacity(plan.repeats);
        for r in 0..plan.repeats {
            let spec = repeat_stream(&plan.stream, r);
            let stream = build_stream(&spec, &corpus)?;
            let reference_stream = match (&plan.reference, &reference) {
                (Some(rs), Some(rc)) => Some(build_stream(
                    &StreamSpec {
                        dataset_id: format!("{}-reference", spec.dataset_id),
                        domains: rs.domains.clone(),
                        ..spec.clone()
                    },
                    rc,
                )?),
                _ => None,
            };
            let probe = sample_probe(
                &stream,
                &corpus,
                plan.probe_size.min(stream.len()),
                derive_seed(plan.seed, &["probe", &r.to_string()]),
            )?;
            repeats.push(RepeatData {
                stream,
                reference_stream,
                probe,
            });
        }
        let source_hash = source.snapshot().hash_hex();
        Ok(Prepared {
            plan: plan.clone(),
            hash,
            source,
            source_hash,
            validation,
            resources,
            corpus,
            reference,
            repeats,
        })
    }

    pub fn run_seed(&self, unit: &RunUnit) -> u64 {
        derive_seed(
            self.plan.seed,
            &[unit.method.name(), &unit.config.config_id.to_string(), &unit.repeat.to_string()],
        )
    }

    /// Accuracy of the frozen source model on each repeat's stream.
    pub fn baseline(&self) -> Result<Baseline> {
        let access = LabelAccess::grant();
        let mut stream_accuracy = Vec::new();
        for rep in &self.repeats {
            let labels = rep.stream.labels(&self.corpus, &access);
            let mut preds = Vec::with_capacity(labels.len());
            for b in rep.stream.iter(&self.corpus) {
                preds.extend(predict(&self.source, b.samples())?);
            }
            stream_accuracy.push(Guarded::new(accuracy(&preds, &labels)?));
        }
        let source_validation_accuracy = match &self.validation {
            Some(v) if !v.is_empty() => evaluate(&self.source, v)?,
            _ => 0.0,
        };
        Ok(Baseline {
            source_validation_accuracy,
            stream_accuracy,
        })
    }

    /// Execute one run from the source state.
    pub fn run(&self, unit: &RunUnit) -> Result<RunRecord> {
        let started = Instant::now();
        if self.source.snapshot().hash_hex() != self.source_hash {
            return Err(Error::invalid("source model changed between runs"));
        }
        let rep = self
            .repeats
            .get(unit.repeat)
            .ok_or_else(|| Error::invalid(format!("repeat {} out of range", unit.repeat)))?;
        let seed = self.run_seed(unit);
        let mut method = build_method(unit.method, &self.source, &unit.config, &self.resources, seed)?;
        let outcome = adapt_stream(
            method.as_mut(),
            &rep.stream,
            &self.corpus,
            Some(&rep.probe),
            seed,
            self.plan.metrics.snd_temperature,
            true,
        )?;
        let num_classes = self.corpus.num_classes as f64;
        let source_accuracy = match &self.validation {
            Some(v) if !v.is_empty() => Some(if outcome.diverged {
                0.0
            } else {
                evaluate(method.deployed_model(), v)?
            }),
            _ => None,
        };
        let cross_accuracy = match (&rep.reference_stream, &self.reference) {
            (Some(rs), Some(rc)) => {
                let mut m = build_method(unit.method, &self.source, &unit.config, &self.resources, seed)?;
                Some(adapt_stream(m.as_mut(), rs, rc, None, seed, self.plan.metrics.snd_temperature, false)?.accuracy)
            }
            _ => None,
        };
        let (entropy, consistency, snd) = if outcome.diverged {
            (Some(num_classes.ln()), Some(f64::MAX), Some(0.0))
        } else {
            (
                outcome.metrics.value(Metric::Entropy),
                outcome.metrics.value(Metric::Consistency),
                outcome.metrics.value(Metric::Snd),
            )
        };
        let log_bytes = encode_log(&outcome.rows);
        let summary = RunSummary {
            plan_hash: self.hash.clone(),
            method: unit.method,
            config: unit.config.clone(),
            repeat: unit.repeat,
            run_seed: seed,
            stream_length: rep.stream.len(),
            steps: outcome.rows.len(),
            entropy,
            consistency,
            snd,
            source_accuracy,
            probe_accuracy: outcome.probe_accuracy,
            cross_accuracy,
            target_accuracy: Guarded::new(outcome.accuracy),
            diverged: outcome.diverged,
            resets: outcome.resets,
            source_hash: self.source_hash.clone(),
            final_hash: to_hex(&method.digest()),
            log_sha256: log_digest(&log_bytes),
        };
        Ok(RunRecord {
            summary,
            log: outcome.rows,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Result of pushing one stream through a method.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub rows: Vec<LogRow>,
    pub metrics: MetricAccumulator,
    /// Correct predictions over the full stream length; samples after a
    /// divergence count as wrong.
    pub accuracy: f64,
    pub probe_accuracy: Option<f64>,
    pub diverged: bool,
    pub resets: usize,
    pub predictions: Vec<usize>,
}

fn all_finite(a: &ndarray::Array2<f64>) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// The online protocol: for each batch, adapt, record predictions, then
/// score the deployed model on the same batch.
pub fn adapt_stream(
    method: &mut dyn TtaMethod,
    stream: &Stream,
    corpus: &LabeledCorpus,
    probe: Option<&LabeledProbe>,
    seed: u64,
    snd_temperature: f64,
    with_metrics: bool,
) -> Result<StreamOutcome> {
    let access = LabelAccess::grant();
    let consistency = AugmentationPipeline::consistency();
    let mut metrics = MetricAccumulator::new();
    let mut rows = Vec::new();
    let mut hits = 0usize;
    let mut seen = 0usize;
    let mut diverged = false;
    let mut resets = 0;
    let mut predictions = Vec::with_capacity(stream.len());
    for batch in stream.iter(corpus) {
        let out = method.step(&batch)?;
        if out.loss.is_some_and(|l| !l.is_finite()) || !all_finite(&out.probs) {
            diverged = true;
            break;
        }
        let preds = out.predictions();
        let labels = batch.labels().reveal(&access);
        let batch_hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        let n = batch.len();
        hits += batch_hits;
        seen += n;
        predictions.extend(&preds);
        resets += out.reset as usize;
        metrics.add(Metric::Accuracy, batch_hits as f64 / n as f64, n);
        if !with_metrics {
            continue;
        }
        let entropy = mean_entropy(&out.probs);
        let deployed = method.deployed_model();
        let clean = deployed.forward(batch.samples())?;
        let pc = softmax_rows(&clean.logits);
        let augmented = consistency.apply_batch(
            batch.samples(),
            derive_seed(seed, &["consistency", &batch.step.to_string()]),
        )?;
        let pa = softmax_rows(&deployed.forward(&augmented)?.logits);
        if !all_finite(&pc) || !all_finite(&pa) || !all_finite(&clean.features) {
            diverged = true;
            break;
        }
        let con = mean_symmetric_kl(&pc, &pa);
        let snd = if n >= 2 {
            snd_score(&clean.features, snd_temperature).ok()
        } else {
            None
        };
        metrics.add(Metric::Entropy, entropy, n);
        metrics.add(Metric::Consistency, con, n);
        if let Some(s) = snd {
            metrics.add(Metric::Snd, s, n);
        }
        rows.push(LogRow {
            t: batch.step,
            domain: stream.domain_names[batch.domain].clone(),
            samples: n,
            batch_accuracy: batch_hits as f64 / n as f64,
            loss: out.loss,
            reset: out.reset,
            entropy,
            consistency: con,
            snd,
            cum_accuracy: hits as f64 / seen as f64,
            cum_entropy: metrics.value(Metric::Entropy).unwrap_or(0.0),
            cum_consistency: metrics.value(Metric::Consistency).unwrap_or(0.0),
            cum_snd: metrics.value(Metric::Snd),
        });
    }
    let probe_accuracy = probe.filter(|p| !p.is_empty()).map(|p| {
        let labels = p.labels().reveal(&access);
        let correct = p
            .positions
            .iter()
            .zip(labels)
            .filter(|(&pos, &y)| predictions.get(pos) == Some(&y))
            .count();
        correct as f64 / p.len() as f64
    });
    let accuracy = if stream.is_empty() {
        0.0
    } else {
        hits as f64 / stream.len() as f64
    };
    Ok(StreamOutcome {
        rows,
        metrics,
        accuracy,
        probe_accuracy,
        diverged,
        resets,
        predictions,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Discard corrupt run directories instead of refusing to continue.
    pub reset_corrupt: bool,
    /// Stop after this many new runs (the rest stay pending).
    pub max_runs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridOutcome {
    pub plan_hash: String,
    pub executed: usize,
    pub skipped: usize,
    pub pending: usize,
}

/// Execute every pending run of `plan`, skipping runs already completed in
/// the store.
pub fn run_grid(plan: &ExperimentPlan, base_dir: &Path, store: &ResultsStore, options: &RunOptions) -> Result<GridOutcome> {
    plan.validate()?;
    let hash = store.write_plan(plan)?;
    let mut todo = Vec::new();
    let mut skipped = 0;
    for unit in plan.units() {
        match store.read_summary(&hash, unit.method, unit.config.config_id, unit.repeat) {
            Ok(Some(_)) => skipped += 1,
            Ok(None) => todo.push(unit),
            Err(e @ Error::CorruptStore { .. }) if !options.reset_corrupt => return Err(e),
            Err(Error::CorruptStore { .. }) => todo.push(unit),
            Err(e) => return Err(e),
        }
    }
    let total = todo.len();
    if let Some(limit) = options.max_runs {
        todo.truncate(limit);
    }
    let pending = total - todo.len();
    if todo.is_empty() && store.read_baseline(&hash)?.is_some() {
        return Ok(GridOutcome {
            plan_hash: hash,
            executed: 0,
            skipped,
            pending,
        });
    }
    let prepared = Prepared::new(plan, base_dir, Some(store))?;
    if store.read_baseline(&hash)?.is_none() {
        store.write_baseline(&hash, &prepared.baseline()?)?;
    }
    for u in &todo {
        store.clear_run(&hash, u.method, u.config.config_id, u.repeat)?;
    }
    let executed = todo.len();
    log::info!("plan {hash}: {executed} runs to execute, {skipped} already complete");
    let results = options.execution.map(todo, |unit| {
        let record = prepared.run(&unit)?;
        store.write_run(&record)?;
        log::info!(
            "{} config {} repeat {} done in {:.1}s",
            unit.method,
            unit.config.config_id,
            unit.repeat,
            record.seconds
        );
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(GridOutcome {
        plan_hash: hash,
        executed,
        skipped,
        pending,
    })
}
