//! Run records and their append-only JSONL store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_digest: String,
    pub trial: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub algorithm: String,
    pub source: Vec<String>,
    pub targets: Vec<String>,
    /// Transform set after exclusions; empty in mdg mode.
    pub transforms: Vec<String>,
    /// Batches per optimizer step.
    pub k: usize,
    pub accuracies: BTreeMap<String, f64>,
    pub selected_step: Option<u64>,
    pub selected_val_accuracy: Option<f64>,
    pub steps: u64,
    pub examples_seen: u64,
    /// Examples drawn per source domain, before the train/val split.
    pub sample_counts: BTreeMap<String, usize>,
    /// Training-split examples per source domain.
    pub train_counts: BTreeMap<String, usize>,
    pub eval_transform_applications: u64,
    pub log_ref: Option<PathBuf>,
    pub wall_time_secs: f64,
    pub config: serde_json::Value,
}

impl RunRecord {
    /// Identity of the (cell, trial) this record fills.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.config_digest, self.trial, self.targets.join(","))
    }

    /// Mean accuracy over targets.
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.values().sum::<f64>() / self.accuracies.len() as f64
    }

    /// JSON line with wall time zeroed, for determinism comparisons.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string(&r).expect("record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    Skip,
    Overwrite,
}

/// Single-writer JSONL sink keyed by [`RunRecord::key`].
#[derive(Debug)]
pub struct RecordSink {
    path: PathBuf,
    policy: Existing,
    keys: BTreeSet<String>,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunRecord = serde_json::from_str(&line)
            .map_err(|e| Error::file(path, format!("line {}: {e}", i + 1)))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::file(
                path,
                format!("line {}: unsupported schema version {}", i + 1, r.schema_version),
            ));
        }
        out.push(r);
    }
    Ok(out)
}

impl RecordSink {
    pub fn open(path: impl Into<PathBuf>, policy: Existing) -> Result<Self> {
        let path = path.into();
        let keys = if path.exists() {
            read_records(&path)?.iter().map(RunRecord::key).collect()
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            BTreeSet::new()
        };
        Ok(RecordSink { path, policy, keys })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    /// True when a cell still needs to run under this sink's policy.
    pub fn wants(&self, key: &str) -> bool {
        self.policy == Existing::Overwrite || !self.contains(key)
    }

    /// Appends `record`. An existing record with the same key is kept
    /// (`Skip`, returns false) or replaced (`Overwrite`).
    pub fn write(&mut self, record: &RunRecord) -> Result<bool> {
        let key = record.key();
        if self.keys.contains(&key) {
            match self.policy {
                Existing::Skip => return Ok(false),
                Existing::Overwrite => {
                    let kept: Vec<String> = read_records(&self.path)?
                        .iter()
                        .filter(|r| r.key() != key)
                        .map(|r| serde_json::to_string(r).expect("record serializes"))
                        .collect();
                    let mut body = kept.join("\n");
                    if !body.is_empty() {
                        body.push('\n');
                    }
                    fs::write(&self.path, body)?;
                }
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        self.keys.insert(key);
        Ok(true)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn record(algorithm: &str, transforms: &[&str], trial: usize, accs: &[(&str, f64)]) -> RunRecord {
        RunRecord {
            schema_version: SCHEMA_VERSION,
            config_digest: format!("{algorithm}-{}", transforms.join("+")),
            trial,
            seed: trial as u64,
            mode: TrainMode::Pmdg,
            algorithm: algorithm.into(),
            source: vec!["s".into()],
            targets: accs.iter().map(|(t, _)| t.to_string()).collect(),
            transforms: transforms.iter().map(|s| s.to_string()).collect(),
            k: transforms.len(),
            accuracies: accs.iter().map(|(t, a)| (t.to_string(), *a)).collect(),
            selected_step: Some(10),
            selected_val_accuracy: Some(0.9),
            steps: 10,
            examples_seen: 100,
            sample_counts: [("s".to_string(), 100)].into(),
            train_counts: [("s".to_string(), 80)].into(),
            eval_transform_applications: 0,
            log_ref: None,
            wall_time_secs: 1.5,
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn skip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/r.jsonl");
        let a = record("erm", &["org"], 0, &[("t", 0.5)]);
        let b = record("erm", &["org"], 1, &[("t", 0.6)]);
        let mut sink = RecordSink::open(&path, Existing::Skip).unwrap();
        assert!(sink.write(&a).unwrap());
        assert!(sink.write(&b).unwrap());
        let mut a2 = a.clone();
        a2.accuracies.insert("t".into(), 0.7);
        assert!(!sink.write(&a2).unwrap());
        assert_eq!(read_records(&path).unwrap(), vec![a.clone(), b.clone()]);

        let mut sink = RecordSink::open(&path, Existing::Overwrite).unwrap();
        assert!(sink.contains(&a.key()));
        assert!(sink.write(&a2).unwrap());
        assert_eq!(read_records(&path).unwrap(), vec![b, a2]);
    }

    #[test]
    fn canonical_json_ignores_wall_time() {
        let a = record("erm", &["org"], 0, &[("t", 0.5)]);
        let mut b = a.clone();
        b.wall_time_secs = 99.0;
        assert_eq!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn schema_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut r = record("erm", &["org"], 0, &[("t", 0.5)]);
        r.schema_version = 99;
        fs::write(&path, serde_json::to_string(&r).unwrap() + "\n").unwrap();
        assert!(read_records(&path).is_err());
    }
}
