//! Config overrides, grid expansion and concurrent sweeps.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{cell_key, cells, run_cell, Cell, ExperimentConfig, RecordSink, RunRecord};
use crate::dataset::DomainDataset;
use crate::error::{Error, Result};

/// Sets the dotted `key` of a resolved config tree. The key must already
/// exist.
pub fn apply_value(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::invalid(key, "no such config key"))?;
    }
    *node = value;
    Ok(())
}

/// `key=value` where value is JSON, or a bare string.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid("override", format!("expected key=value, got `{spec}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    apply_value(tree, key.trim(), value)
}

/// Applies overrides to `cfg` and re-validates.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree = cfg.resolved();
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let out: ExperimentConfig = serde_json::from_value(tree)?;
    out.validate()?;
    Ok(out)
}

/// A base config and a grid of dotted keys to vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub base: Value,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
}

/// Cartesian product of the grid over the base, keys varying in sorted
/// order with the last key fastest.
pub fn expand_grid(sweep: &SweepFile) -> Result<Vec<ExperimentConfig>> {
    let base: ExperimentConfig = serde_json::from_value(sweep.base.clone())?;
    base.validate()?;
    let mut trees = vec![base.resolved()];
    for (key, values) in &sweep.grid {
        if values.is_empty() {
            return Err(Error::invalid(format!("grid.{key}"), "no values"));
        }
        let mut next = Vec::with_capacity(trees.len() * values.len());
        for t in &trees {
            for v in values {
                let mut t = t.clone();
                apply_value(&mut t, key, v.clone())?;
                next.push(t);
            }
        }
        trees = next;
    }
    trees
        .into_iter()
        .map(|t| {
            let c: ExperimentConfig = serde_json::from_value(t)?;
            c.validate()?;
            Ok(c)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepSummary {
    pub written: usize,
    pub skipped: usize,
    /// Records produced by this sweep, in cell order.
    pub records: Vec<RunRecord>,
}

/// Runs every cell of every config on up to `jobs` threads. Records reach
/// `sink` in cell order regardless of completion order.
pub fn run_sweep(configs: &[ExperimentConfig], jobs: usize, sink: &mut RecordSink) -> Result<SweepSummary> {
    for c in configs {
        c.validate()?;
    }
    let mut datasets: BTreeMap<String, Arc<DomainDataset>> = BTreeMap::new();
    let mut units: Vec<(usize, Cell, Arc<DomainDataset>)> = Vec::new();
    let mut summary = SweepSummary::default();
    for (i, cfg) in configs.iter().enumerate() {
        let digest = cfg.digest();
        let wanted: Vec<Cell> = cells(cfg).into_iter().filter(|c| sink.wants(&cell_key(&digest, c))).collect();
        summary.skipped += cells(cfg).len() - wanted.len();
        if wanted.is_empty() {
            continue;
        }
        let key = serde_json::to_string(&cfg.dataset)?;
        let data = match datasets.get(&key) {
            Some(d) => d.clone(),
            None => {
                let d = Arc::new(cfg.dataset.load()?);
                datasets.insert(key, d.clone());
                d
            }
        };
        units.extend(wanted.into_iter().map(|c| (i, c, data.clone())));
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    let mut first_err = None;
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(units.len().max(1)) {
            let tx = tx.clone();
            let (next, stop, units) = (&next, &stop, &units);
            scope.spawn(move || loop {
                let u = next.fetch_add(1, Ordering::SeqCst);
                if u >= units.len() || stop.load(Ordering::SeqCst) {
                    break;
                }
                let (ci, cell, data) = &units[u];
                let res = run_cell(&configs[*ci], data, cell);
                if tx.send((u, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, RunRecord> = BTreeMap::new();
        let mut flushed = 0;
        for (u, res) in rx {
            match res {
                Ok(r) => {
                    pending.insert(u, r);
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
            while let Some(r) = pending.remove(&flushed) {
                flushed += 1;
                match sink.write(&r) {
                    Ok(_) => {
                        log::info!("recorded {}", r.key());
                        summary.written += 1;
                        summary.records.push(r);
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        first_err.get_or_insert(e);
                    }
                }
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
