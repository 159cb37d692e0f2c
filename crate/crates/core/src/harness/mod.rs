//! Experiment execution, record keeping and reports.

mod config;
mod records;
mod report;
mod sweep;

pub use config::{DatasetSpec, ExperimentConfig, TrainSection};
pub use records::{read_records, Existing, RecordSink, RunRecord, SCHEMA_VERSION};
pub use report::{
    aggregate, correlation_report, format_cell, gain_matrix, mean_stderr, pearson, render_report,
    render_table_markdown, spearman, AggregateRow, CorrelationReport, GainMatrix, ReportKind,
};
pub use sweep::{apply_override, apply_overrides, expand_grid, run_sweep, SweepFile, SweepSummary};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::time::Instant;

use crate::dataset::{balanced_shares, subsample, DomainDataset};
use crate::error::{Error, Result};
use crate::trainer::{evaluate_with, train, write_log_jsonl, TrainMode};

/// One training job: a trial of a config on a group of targets sharing a
/// transform set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub trial: usize,
    pub targets: Vec<String>,
    pub transforms: Vec<String>,
}

/// Cells of `cfg` in execution order. Targets whose exclusions leave the
/// same transform set train once together.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut groups: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for t in &cfg.targets {
        let set = match cfg.mode {
            TrainMode::Pmdg => cfg.transforms_for(t),
            TrainMode::Mdg => Vec::new(),
        };
        match groups.iter_mut().find(|(s, _)| *s == set) {
            Some((_, ts)) => ts.push(t.clone()),
            None => groups.push((set, vec![t.clone()])),
        }
    }
    (0..cfg.trials)
        .flat_map(|trial| {
            groups.iter().map(move |(set, ts)| Cell {
                trial,
                targets: ts.clone(),
                transforms: set.clone(),
            })
        })
        .collect()
}

pub(crate) fn cell_key(digest: &str, cell: &Cell) -> String {
    format!("{digest}/{}/{}", cell.trial, cell.targets.join(","))
}

/// Source examples for a trial, subsampled per `train.samples`.
fn training_data(cfg: &ExperimentConfig, data: &DomainDataset, seed: u64) -> Result<DomainDataset> {
    let mut examples = Vec::new();
    for d in &cfg.source {
        let part = data.filter_domains(std::slice::from_ref(d)).map_err(|e| e.within("source"))?;
        let part = match cfg.train.samples.as_ref().and_then(|s| s.get(d)) {
            Some(&n) => {
                if n > part.len() {
                    return Err(Error::Data(format!(
                        "insufficient data: domain `{d}` has {} examples, {n} requested",
                        part.len()
                    )));
                }
                subsample(&part, n, seed).map_err(|e| e.within("train.samples"))?
            }
            None => part,
        };
        examples.extend(part.examples);
    }
    Ok(data.with_examples(examples))
}

pub fn run_cell(cfg: &ExperimentConfig, data: &DomainDataset, cell: &Cell) -> Result<RunRecord> {
    let started = Instant::now();
    let digest = cfg.digest();
    for t in &cell.targets {
        if !data.domains.contains(t) {
            return Err(Error::invalid(
                "targets",
                format!("domain `{t}` not in dataset (has {})", data.domains.join(", ")),
            ));
        }
    }
    let tc = cfg.train_config(cell.trial, &cell.transforms);
    let context = |e: Error| match e {
        Error::Data(m) => Error::Data(format!("config {} trial {}: {m}", &digest[..12], cell.trial)),
        other => other,
    };
    let source = training_data(cfg, data, tc.seed).map_err(context)?;
    let outcome = train(&tc, &source).map_err(context)?;
    let accuracies = evaluate_with(&outcome.model, data, &cell.targets, tc.eval_batch_size, tc.normalizer)
        .map_err(context)?;
    let log_ref = match &cfg.train.log_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!(
                "{}-t{}-{}.jsonl",
                &digest[..16],
                cell.trial,
                cell.targets.join("+")
            ));
            write_log_jsonl(&outcome.log, BufWriter::new(File::create(&path)?))?;
            Some(path)
        }
        None => None,
    };
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config_digest: digest,
        trial: cell.trial,
        seed: tc.seed,
        mode: cfg.mode,
        algorithm: cfg.algorithm.clone(),
        source: cfg.source.clone(),
        targets: cell.targets.clone(),
        transforms: cell.transforms.clone(),
        k: outcome.domains_per_update,
        accuracies,
        selected_step: outcome.selected.map(|c| c.step),
        selected_val_accuracy: outcome.selected.map(|c| c.val_accuracy),
        steps: outcome.steps,
        examples_seen: outcome.examples_seen,
        sample_counts: source.domain_counts(),
        train_counts: outcome.sample_counts,
        eval_transform_applications: outcome.eval_transform_applications,
        log_ref,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: cfg.resolved(),
    })
}

/// Runs every trial of `cfg`; trial `t` uses seed `train.seed + t`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    run_experiment_on(cfg, &data)
}

/// As [`run_experiment`], on already loaded data.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &DomainDataset) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cells(cfg).iter().map(|c| run_cell(cfg, data, c)).collect()
}

/// Paired configs with equal total training samples: `n` from `source`
/// (pmdg) versus `n` split across `mdg_domains` (mdg), remainders going to
/// the first domains.
pub fn equal_data_configs(
    shared: &ExperimentConfig,
    source: &str,
    mdg_domains: &[String],
    n: usize,
) -> Result<(ExperimentConfig, ExperimentConfig)> {
    if mdg_domains.len() < 2 {
        return Err(Error::invalid("mdg_domains", "at least two domains are required"));
    }
    for (i, d) in mdg_domains.iter().enumerate() {
        if mdg_domains[..i].contains(d) {
            return Err(Error::invalid("mdg_domains", format!("`{d}` listed twice")));
        }
    }
    if n < mdg_domains.len() {
        return Err(Error::invalid("n", format!("must be at least {}", mdg_domains.len())));
    }
    let mut pmdg = shared.clone();
    pmdg.mode = TrainMode::Pmdg;
    pmdg.source = vec![source.to_string()];
    pmdg.train.samples = Some([(source.to_string(), n)].into());

    let mut mdg = shared.clone();
    mdg.mode = TrainMode::Mdg;
    mdg.source = mdg_domains.to_vec();
    mdg.train.samples = Some(
        mdg_domains
            .iter()
            .cloned()
            .zip(balanced_shares(n, mdg_domains.len()))
            .collect::<BTreeMap<_, _>>(),
    );
    pmdg.validate()?;
    mdg.validate()?;
    Ok((pmdg, mdg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualDataPair {
    pub n: usize,
    pub pmdg: Vec<RunRecord>,
    pub mdg: Vec<RunRecord>,
}

pub fn equal_data_protocol(
    data: &DomainDataset,
    shared: &ExperimentConfig,
    source: &str,
    mdg_domains: &[String],
    n: usize,
) -> Result<EqualDataPair> {
    let (pmdg, mdg) = equal_data_configs(shared, source, mdg_domains, n)?;
    let counts = data.domain_counts();
    for cfg in [&pmdg, &mdg] {
        for (d, &want) in cfg.train.samples.as_ref().expect("set above") {
            let have = counts.get(d).copied().unwrap_or(0);
            if want > have {
                return Err(Error::Data(format!(
                    "insufficient data: domain `{d}` has {have} examples, {want} requested"
                )));
            }
        }
    }
    Ok(EqualDataPair {
        n,
        pmdg: run_experiment_on(&pmdg, data)?,
        mdg: run_experiment_on(&mdg, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Background, SyntheticDomain, SyntheticShiftSpec};
    use crate::models::{ModelKind, ModelSpec, NormKind};

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut spec = SyntheticShiftSpec::color_shift(2, 0.9, 0.1, 16, 50, 5);
        for (name, rho) in [("third", 0.5), ("fourth", 0.5)] {
            spec.domains.push(SyntheticDomain::new(name, 2, rho, Background::Noise));
        }
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic(spec),
            source: vec!["source".into()],
            targets: vec!["target".into()],
            mode: TrainMode::Pmdg,
            algorithm: "erm".into(),
            hparams: Default::default(),
            transforms: vec!["org".into(), "edge".into()],
            transform_params: Default::default(),
            trials: 2,
            train: TrainSection {
                epochs: 1,
                batch_size: 8,
                eval_every: 2,
                model: ModelSpec {
                    kind: ModelKind::Mlp,
                    widths: vec![4],
                    norm: NormKind::None,
                    ..ModelSpec::default()
                },
                ..TrainSection::default()
            },
            exclusions: BTreeMap::new(),
        }
    }

    #[test]
    fn trials_get_consecutive_seeds() {
        let mut cfg = tiny_config();
        cfg.train.seed = 10;
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![10, 11]);
        for r in &recs {
            assert_eq!(r.k, 2);
            assert_eq!(r.eval_transform_applications, 0);
            assert!(r.accuracies.values().all(|a| (0.0..=1.0).contains(a)));
            assert_eq!(r.sample_counts["source"], 50);
            assert_eq!(r.config, cfg.resolved());
        }
    }

    #[test]
    fn exclusions_split_target_groups() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        cfg.targets = vec!["target".into(), "third".into()];
        cfg.transforms = vec!["org".into(), "style_stats".into()];
        cfg.exclusions.insert("third".into(), vec!["style_stats".into()]);
        let cs = cells(&cfg);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[1].targets, vec!["third"]);
        assert_eq!(cs[1].transforms, vec!["org"]);
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs[1].transforms, vec!["org"]);
        assert_eq!(recs[1].k, 1);
        assert_eq!(recs[0].k, 2);
    }

    #[test]
    fn equal_data_counts() {
        let cfg = tiny_config();
        let doms: Vec<String> = ["source", "third", "fourth"].map(String::from).to_vec();
        for (n, expect) in [(90, vec![30, 30, 30]), (91, vec![31, 30, 30])] {
            let (p, m) = equal_data_configs(&cfg, "source", &doms, n).unwrap();
            assert_eq!(p.train.samples.unwrap()["source"], n);
            let ms = m.train.samples.unwrap();
            assert_eq!(doms.iter().map(|d| ms[d]).collect::<Vec<_>>(), expect);
            assert_eq!(m.algorithm, p.algorithm);
        }
        let data = generate_synthetic(match &cfg.dataset {
            DatasetSpec::Synthetic(s) => s,
            _ => unreachable!(),
        })
        .unwrap();
        let mut shared = cfg.clone();
        shared.trials = 1;
        let pair = equal_data_protocol(&data, &shared, "source", &doms, 40).unwrap();
        assert_eq!(pair.pmdg[0].sample_counts.values().sum::<usize>(), 40);
        assert_eq!(pair.mdg[0].sample_counts.values().sum::<usize>(), 40);
        assert_eq!(pair.mdg[0].sample_counts["source"], 14);
        assert!(equal_data_protocol(&data, &shared, "source", &doms, 400).is_err());
    }

    #[test]
    fn unknown_target_is_reported() {
        let mut cfg = tiny_config();
        cfg.targets = vec!["mars".into()];
        assert_eq!(run_experiment(&cfg).unwrap_err().key(), Some("targets"));
    }
}
