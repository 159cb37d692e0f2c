//! Training loops for PMDG (pseudo-domains from one source) and MDG (real
//! source domains), with training-domain validation and best-val selection.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::algorithms::{build_algorithm, Hparams};
use crate::batch::{MiniBatch, Normalizer};
use crate::dataset::{
    eval_batches, make_minibatches, split_in_domain, AugmentConfig, BatchOptions, DomainDataset,
};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::pseudodomain::{make_transform_set_with, TransformParams};
use crate::rng::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pmdg,
    Mdg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub mode: TrainMode,
    pub source_domains: Vec<String>,
    pub transforms: Vec<String>,
    pub transform_params: TransformParams,
    pub algorithm: String,
    pub hparams: Hparams,
    /// `num_classes` and `image_size` are taken from the data.
    pub model: ModelSpec,
    pub holdout_fraction: f64,
    pub augment: AugmentConfig,
    pub normalizer: Normalizer,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            seed: 0,
            eval_every: 50,
            mode: TrainMode::Pmdg,
            source_domains: Vec::new(),
            transforms: vec!["org".into()],
            transform_params: TransformParams::default(),
            algorithm: "erm".into(),
            hparams: Hparams::default(),
            model: ModelSpec::default(),
            holdout_fraction: 0.2,
            augment: AugmentConfig::default(),
            normalizer: Normalizer::default(),
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size", "must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("train.eval_every", "must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::invalid("train.holdout_fraction", "must be in (0, 0.5)"));
        }
        match self.mode {
            TrainMode::Pmdg => {
                if self.source_domains.len() != 1 {
                    return Err(Error::invalid(
                        "source",
                        format!(
                            "pmdg mode requires exactly one source domain, got {}",
                            self.source_domains.len()
                        ),
                    ));
                }
                if self.transforms.is_empty() {
                    return Err(Error::invalid("transforms", "empty transform set"));
                }
            }
            TrainMode::Mdg => {
                if self.source_domains.len() < 2 {
                    return Err(Error::invalid(
                        "source",
                        format!(
                            "mdg mode requires at least two source domains, got {}",
                            self.source_domains.len()
                        ),
                    ));
                }
            }
        }
        self.hparams.validate()
    }
}

/// One JSONL line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: u64,
    pub task_loss: f64,
    pub penalty: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Restored to the selected checkpoint (or the initialization when no
    /// step was taken).
    pub model: Model,
    pub log: Vec<LogEvent>,
    pub selected: Option<Checkpoint>,
    pub steps: u64,
    /// Training-split examples per source domain.
    pub sample_counts: BTreeMap<String, usize>,
    /// Examples fed to the algorithm, counting each pseudo-domain copy once.
    pub examples_seen: u64,
    /// Pseudo-domain transform applications during training.
    pub train_transform_applications: u64,
    /// Transforms or default augmentation found on validation batches.
    pub eval_transform_applications: u64,
    /// Number of batches handed to each update.
    pub domains_per_update: usize,
}

fn write_err(e: std::io::Error) -> Error {
    Error::Io(e)
}

pub fn write_log_jsonl(log: &[LogEvent], mut out: impl Write) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(write_err)?;
    }
    Ok(())
}

/// Best validation checkpoint; ties go to the earliest step.
pub fn select_checkpoint(log: &[LogEvent]) -> Result<Checkpoint> {
    let mut best: Option<Checkpoint> = None;
    for e in log {
        if let Some(acc) = e.val_accuracy {
            if best.is_none_or(|b| acc > b.val_accuracy) {
                best = Some(Checkpoint {
                    step: e.step,
                    val_accuracy: acc,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Data("no evaluation events in the training log".into()))
}

/// Counts what was applied to evaluation batches; used to prove purity.
fn audit(batches: &[MiniBatch]) -> u64 {
    batches
        .iter()
        .map(|b| b.provenance.transforms.len() as u64 + u64::from(b.provenance.default_augmented))
        .sum()
}

fn correct_and_total(model: &Model, ds: &DomainDataset, batch_size: usize, normalizer: Normalizer) -> Result<(usize, usize, u64)> {
    let batches = eval_batches(ds, batch_size, normalizer)?;
    let applied = audit(&batches);
    let mut correct = 0;
    for b in &batches {
        let pred = model.predict(&b.images)?.argmax_rows();
        let truth = b.targets().argmax_rows();
        correct += pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    }
    Ok((correct, ds.len(), applied))
}

/// Accuracy of `model` on each requested domain, in eval mode without any
/// augmentation.
pub fn evaluate(model: &Model, ds: &DomainDataset, domains: &[String]) -> Result<BTreeMap<String, f64>> {
    evaluate_with(model, ds, domains, 256, Normalizer::default())
}

pub fn evaluate_with(
    model: &Model,
    ds: &DomainDataset,
    domains: &[String],
    batch_size: usize,
    normalizer: Normalizer,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for d in domains {
        let part = ds.filter_domains(std::slice::from_ref(d))?;
        if part.is_empty() {
            return Err(Error::Data(format!("domain `{d}` has no examples")));
        }
        let (correct, total, _) = correct_and_total(model, &part, batch_size, normalizer)?;
        out.insert(d.clone(), correct as f64 / total as f64);
    }
    Ok(out)
}

/// Cycles through epochs of one domain's training batches.
struct DomainStream {
    data: DomainDataset,
    seed: u64,
    epoch: u64,
    queue: VecDeque<MiniBatch>,
}

impl DomainStream {
    fn next(&mut self, batch_size: usize, opts: &BatchOptions) -> Result<MiniBatch> {
        if self.queue.is_empty() {
            self.queue = make_minibatches(&self.data, batch_size, self.seed, self.epoch, opts)?.into();
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().expect("non-empty epoch"))
    }
}

/// Runs a full training job on `data`.
///
/// Both modes take `epochs * floor(n_train / batch_size)` optimizer steps,
/// where `n_train` counts the training split of all source domains.
pub fn train(cfg: &TrainConfig, data: &DomainDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    for d in &cfg.source_domains {
        if !data.domains.contains(d) {
            return Err(Error::invalid(
                "source",
                format!("domain `{d}` not in dataset (has {})", data.domains.join(", ")),
            ));
        }
    }
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?
        .to_vec();
    let source = data.filter_domains(&cfg.source_domains)?;
    let split = split_in_domain(&source, cfg.holdout_fraction, cfg.seed)?;
    let spec = ModelSpec {
        num_classes: data.num_classes(),
        image_size: shape[1],
        ..cfg.model.clone()
    };
    let model = build_model(&spec, cfg.seed)?;
    let mut algorithm = build_algorithm(&cfg.algorithm, model.clone(), &cfg.hparams, cfg.seed)?;
    let opts = BatchOptions {
        augment: cfg.augment,
        normalizer: cfg.normalizer,
    };

    let per_epoch = (split.train.len() / cfg.batch_size) as u64;
    let total_steps = cfg.epochs * per_epoch;
    let sample_counts = split.train.domain_counts();
    if cfg.epochs > 0 && per_epoch == 0 {
        return Err(Error::Data(format!(
            "training split has {} examples, fewer than batch size {}",
            split.train.len(),
            cfg.batch_size
        )));
    }

    let mut transforms = match cfg.mode {
        TrainMode::Pmdg => Some(make_transform_set_with(&cfg.transforms, cfg.seed, &cfg.transform_params)?),
        TrainMode::Mdg => None,
    };
    let domains_per_update = match &transforms {
        Some(set) => set.k(),
        None => cfg.source_domains.len(),
    };
    let mut streams: Vec<DomainStream> = match cfg.mode {
        TrainMode::Pmdg => Vec::new(),
        TrainMode::Mdg => cfg
            .source_domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Ok(DomainStream {
                    data: split.train.filter_domains(std::slice::from_ref(d))?,
                    seed: mix_seed(cfg.seed, &[i as u64]),
                    epoch: 0,
                    queue: VecDeque::new(),
                })
            })
            .collect::<Result<_>>()?,
    };

    let mut log = Vec::new();
    let mut best: Option<(Checkpoint, Model)> = None;
    let mut eval_applied = 0;
    let mut examples_seen = 0u64;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut pending: VecDeque<MiniBatch> = VecDeque::new();
    while step < total_steps {
        let batches = match &mut transforms {
            Some(set) => {
                if pending.is_empty() {
                    pending = make_minibatches(&split.train, cfg.batch_size, cfg.seed, epoch, &opts)?.into();
                    epoch += 1;
                }
                let batch = pending.pop_front().expect("non-empty epoch");
                set.apply(&batch)?
            }
            None => streams
                .iter_mut()
                .map(|s| s.next(cfg.batch_size, &opts))
                .collect::<Result<Vec<_>>>()?,
        };
        if batches.len() != domains_per_update || batches.iter().any(|b| b.len() != cfg.batch_size) {
            return Err(Error::Data("update received a malformed set of domain batches".into()));
        }
        examples_seen += batches.iter().map(|b| b.len() as u64).sum::<u64>();
        let report = algorithm.update(&batches)?;
        step += 1;
        let mut event = LogEvent {
            step,
            task_loss: report.task_loss,
            penalty: report.penalty,
            total: report.total,
            val_accuracy: None,
        };
        if step % cfg.eval_every == 0 || step == total_steps {
            let (correct, n, applied) =
                correct_and_total(algorithm.model(), &split.val, cfg.eval_batch_size, cfg.normalizer)?;
            eval_applied += applied;
            let acc = correct as f64 / n as f64;
            event.val_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > b.val_accuracy) {
                best = Some((
                    Checkpoint {
                        step,
                        val_accuracy: acc,
                    },
                    algorithm.model().clone(),
                ));
            }
        }
        log::debug!("step {step}: total {:.5}", report.total);
        log.push(event);
    }

    let (selected, model) = match best {
        Some((ck, m)) => (Some(ck), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        log,
        selected,
        steps: step,
        sample_counts,
        examples_seen,
        train_transform_applications: transforms.as_ref().map_or(0, |s| s.applications()),
        eval_transform_applications: eval_applied,
        domains_per_update,
    })
}
