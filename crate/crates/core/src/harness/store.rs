//! Results store. Layout under the store root:
//!
//! ```text
//! <plan_hash>/plan.json
//! <plan_hash>/source.state
//! <plan_hash>/baseline.json
//! <plan_hash>/<method>/<config_id>/<repeat>/{summary,log,timing}
//! ```
//!
//! Every file is written to a temporary name and renamed into place; the
//! summary is written last and records the log digest, so a run counts as
//! complete exactly when its summary exists and matches its log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::Guarded;
use crate::error::{Error, Result};
use crate::methods::{HyperparamConfig, MethodKind};
use crate::model::to_hex;

use super::ExperimentPlan;

/// Final state of one (method, config, repeat) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub plan_hash: String,
    pub method: MethodKind,
    pub config: HyperparamConfig,
    pub repeat: usize,
    pub run_seed: u64,
    pub stream_length: usize,
    pub steps: usize,
    pub entropy: Option<f64>,
    pub consistency: Option<f64>,
    pub snd: Option<f64>,
    pub source_accuracy: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub cross_accuracy: Option<f64>,
    pub target_accuracy: Guarded<f64>,
    pub diverged: bool,
    pub resets: usize,
    pub source_hash: String,
    pub final_hash: String,
    pub log_sha256: String,
}

impl RunSummary {
    pub fn config_id(&self) -> usize {
        self.config.config_id
    }
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: usize,
    pub domain: String,
    pub samples: usize,
    pub batch_accuracy: f64,
    pub loss: Option<f64>,
    pub reset: bool,
    pub entropy: f64,
    pub consistency: f64,
    pub snd: Option<f64>,
    pub cum_accuracy: f64,
    pub cum_entropy: f64,
    pub cum_consistency: f64,
    pub cum_snd: Option<f64>,
}

/// Accuracy of the frozen source model, per repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub source_validation_accuracy: f64,
    pub stream_accuracy: Vec<Guarded<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub log: Vec<LogRow>,
    pub seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct Timing {
    seconds: f64,
}

pub fn encode_log(rows: &[LogRow]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("log row serializes");
        out.push(b'\n');
    }
    out
}

pub fn log_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResultsStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan_dir(&self, hash: &str) -> PathBuf {
        self.root.join(hash)
    }

    pub fn run_dir(&self, hash: &str, method: MethodKind, config_id: usize, repeat: usize) -> PathBuf {
        self.plan_dir(hash)
            .join(method.name())
            .join(config_id.to_string())
            .join(repeat.to_string())
    }

    /// Hashes of all plans with a readable `plan.json`, sorted.
    pub fn plans(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().join("plan.json").is_file() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn write_plan(&self, plan: &ExperimentPlan) -> Result<String> {
        let hash = plan.hash();
        let path = self.plan_dir(&hash).join("plan.json");
        let bytes = serde_json::to_vec_pretty(plan)?;
        if let Ok(existing) = fs::read(&path) {
            if existing == bytes {
                return Ok(hash);
            }
            return Err(corrupt(&path, "stored plan differs from the plan with the same hash"));
        }
        write_atomic(&path, &bytes)?;
        Ok(hash)
    }

    pub fn read_plan(&self, hash: &str) -> Result<ExperimentPlan> {
        let path = self.plan_dir(hash).join("plan.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string()))
    }

    pub fn source_state_path(&self, hash: &str) -> PathBuf {
        self.plan_dir(hash).join("source.state")
    }

    pub fn write_bytes(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)
    }

    pub fn write_baseline(&self, hash: &str, baseline: &Baseline) -> Result<()> {
        write_atomic(&self.plan_dir(hash).join("baseline.json"), &serde_json::to_vec_pretty(baseline)?)
    }

    pub fn read_baseline(&self, hash: &str) -> Result<Option<Baseline>> {
        let path = self.plan_dir(hash).join("baseline.json");
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| corrupt(&path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn write_run(&self, record: &RunRecord) -> Result<()> {
        let s = &record.summary;
        let dir = self.run_dir(&s.plan_hash, s.method, s.config_id(), s.repeat);
        let log = encode_log(&record.log);
        if log_digest(&log) != s.log_sha256 {
            return Err(Error::invalid("summary digest does not match its log"));
        }
        write_atomic(&dir.join("log"), &log)?;
        write_atomic(&dir.join("timing"), &serde_json::to_vec(&Timing { seconds: record.seconds })?)?;
        write_atomic(&dir.join("summary"), &serde_json::to_vec_pretty(s)?)
    }

    /// `Ok(None)` if the run has not completed; an error if its files are
    /// present but inconsistent.
    pub fn read_summary(&self, hash: &str, method: MethodKind, config_id: usize, repeat: usize) -> Result<Option<RunSummary>> {
        let dir = self.run_dir(hash, method, config_id, repeat);
        let path = dir.join("summary");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let summary: RunSummary = serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
        if summary.plan_hash != hash
            || summary.method != method
            || summary.config_id() != config_id
            || summary.repeat != repeat
        {
            return Err(corrupt(&path, "summary does not belong to this location"));
        }
        let log_path = dir.join("log");
        let log = fs::read(&log_path).map_err(|_| corrupt(&log_path, "log missing"))?;
        if log_digest(&log) != summary.log_sha256 {
            return Err(corrupt(&log_path, "log digest mismatch"));
        }
        Ok(Some(summary))
    }

    pub fn read_log(&self, hash: &str, method: MethodKind, config_id: usize, repeat: usize) -> Result<Vec<LogRow>> {
        let path = self.run_dir(hash, method, config_id, repeat).join("log");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(&path, format!("line {}: {e}", i + 1))))
            .collect()
    }

    /// Remove a run's files so it can be recomputed.
    pub fn clear_run(&self, hash: &str, method: MethodKind, config_id: usize, repeat: usize) -> Result<()> {
        let dir = self.run_dir(hash, method, config_id, repeat);
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(&dir, e)),
        }
    }

    /// All completed runs of a plan, in (method, config, repeat) order.
    /// Incomplete run directories are ignored; corrupt ones are errors.
    pub fn load_runs(&self, hash: &str) -> Result<Vec<RunSummary>> {
        let plan_dir = self.plan_dir(hash);
        let mut out = Vec::new();
        for method in MethodKind::ALL {
            let mdir = plan_dir.join(method.name());
            for config_id in numeric_children(&mdir)? {
                for repeat in numeric_children(&mdir.join(config_id.to_string()))? {
                    if let Some(s) = self.read_summary(hash, method, config_id, repeat)? {
                        out.push(s);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn numeric_children(dir: &Path) -> Result<Vec<usize>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(n) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Resolve a path given on the command line: either a store root or one
/// plan directory inside it.
pub fn resolve(path: &Path) -> Result<(ResultsStore, Vec<String>)> {
    if path.join("plan.json").is_file() {
        let hash = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("cannot name plan directory {}", path.display())))?
            .to_string();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok((ResultsStore::new(root), vec![hash]));
    }
    let store = ResultsStore::new(path);
    let plans = store.plans()?;
    if plans.is_empty() {
        return Err(Error::invalid(format!("no plans found under {}", path.display())));
    }
    Ok((store, plans))
}
