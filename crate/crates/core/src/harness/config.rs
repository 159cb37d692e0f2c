//! Declarative experiment description.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{AlgorithmKind, Hparams};
use crate::dataset::{generate_synthetic, load_image_folder, AugmentConfig, DomainDataset, SyntheticShiftSpec};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::pseudodomain::{TransformParams, REGISTRY};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticShiftSpec),
    Folder { root: PathBuf, image_size: usize },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DomainDataset> {
        match self {
            DatasetSpec::Synthetic(s) => generate_synthetic(s).map_err(|e| e.within("dataset.synthetic")),
            DatasetSpec::Folder { root, image_size } => load_image_folder(root, *image_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    /// Trial `t` runs with `seed + t`.
    pub seed: u64,
    pub eval_every: u64,
    pub holdout_fraction: f64,
    pub augment: AugmentConfig,
    pub model: ModelSpec,
    pub eval_batch_size: usize,
    /// Per-source-domain sample budgets drawn before the train/val split.
    pub samples: Option<BTreeMap<String, usize>>,
    /// Directory for per-run JSONL training logs.
    pub log_dir: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            eval_every: t.eval_every,
            holdout_fraction: t.holdout_fraction,
            augment: t.augment,
            model: t.model,
            eval_batch_size: t.eval_batch_size,
            samples: None,
            log_dir: None,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

fn default_trials() -> usize {
    3
}

fn default_transforms() -> Vec<String> {
    vec!["org".into()]
}

fn default_algorithm() -> String {
    "erm".into()
}

fn default_mode() -> TrainMode {
    TrainMode::Pmdg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(deserialize_with = "one_or_many")]
    pub source: Vec<String>,
    #[serde(deserialize_with = "one_or_many")]
    pub targets: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    #[serde(default)]
    pub hparams: Hparams,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<String>,
    #[serde(default)]
    pub transform_params: TransformParams,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub train: TrainSection,
    /// Target domain -> transforms dropped from the set when testing on it.
    #[serde(default)]
    pub exclusions: BTreeMap<String, Vec<String>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be at least 1"));
        }
        if self.source.is_empty() {
            return Err(Error::invalid("source", "at least one source domain is required"));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("targets", "at least one target domain is required"));
        }
        if let Some(t) = self.targets.iter().find(|t| self.source.contains(t)) {
            return Err(Error::invalid("targets", format!("`{t}` is also a source domain")));
        }
        let kind = AlgorithmKind::parse(&self.algorithm)?;
        if kind.pairwise() && self.mode == TrainMode::Pmdg {
            if let Some(t) = self.targets.iter().find(|t| self.transforms_for(t).len() < 2) {
                return Err(Error::invalid(
                    "transforms",
                    format!("{} needs at least 2 pseudo-domains (target `{t}`)", self.algorithm),
                ));
            }
        }
        for t in &self.transforms {
            check_transform(t, "transforms")?;
        }
        for (target, names) in &self.exclusions {
            for t in names {
                check_transform(t, &format!("exclusions.{target}"))?;
            }
        }
        if let Some(samples) = &self.train.samples {
            for d in samples.keys() {
                if !self.source.contains(d) {
                    return Err(Error::invalid(
                        "train.samples",
                        format!("`{d}` is not a source domain"),
                    ));
                }
            }
        }
        self.train.model.validate()?;
        self.train_config(0, &self.transforms).validate()
    }

    /// Transform set used when testing on `target`.
    pub fn transforms_for(&self, target: &str) -> Vec<String> {
        match self.exclusions.get(target) {
            Some(drop) => self.transforms.iter().filter(|t| !drop.contains(t)).cloned().collect(),
            None => self.transforms.clone(),
        }
    }

    pub fn train_config(&self, trial: usize, transforms: &[String]) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed + trial as u64,
            eval_every: self.train.eval_every,
            mode: self.mode,
            source_domains: self.source.clone(),
            transforms: transforms.to_vec(),
            transform_params: self.transform_params.clone(),
            algorithm: self.algorithm.clone(),
            hparams: self.hparams.clone(),
            model: self.train.model.clone(),
            holdout_fraction: self.train.holdout_fraction,
            augment: self.train.augment,
            eval_batch_size: self.train.eval_batch_size,
            ..TrainConfig::default()
        }
    }

    /// Config with every default filled in, as a JSON tree.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical resolved JSON.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn check_transform(name: &str, key: &str) -> Result<()> {
    if REGISTRY.contains(&name) {
        Ok(())
    } else {
        Err(Error::invalid(
            key,
            format!("unknown transform `{name}`; registered: {}", REGISTRY.join(", ")),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "dataset": {"synthetic": {"num_classes": 2, "image_size": 16, "samples_per_domain": 40, "seed": 3,
            "domains": [
                {"name": "source", "hue_palette": [0.0, 0.5], "background": "flat", "rotation_range": 20.0, "color_class_correlation": 0.9},
                {"name": "target", "hue_palette": [0.0, 0.5], "background": "flat", "rotation_range": 20.0, "color_class_correlation": 0.1}
            ]}},
        "source": "source",
        "targets": ["target"]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.transforms, vec!["org"]);
        assert_eq!(cfg.mode, TrainMode::Pmdg);
        assert_eq!(cfg.source, vec!["source"]);
        assert_eq!(cfg.digest().len(), 64);
        assert_eq!(cfg.digest(), cfg.clone().digest());
        let round: ExperimentConfig = serde_json::from_value(cfg.resolved()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.hparams.lr = 0.02;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let base = ExperimentConfig::from_json(MINIMAL).unwrap();
        let check = |f: &dyn Fn(&mut ExperimentConfig), key: &str| {
            let mut c = base.clone();
            f(&mut c);
            assert_eq!(c.validate().unwrap_err().key(), Some(key));
        };
        check(&|c| c.trials = 0, "trials");
        check(&|c| c.transforms = vec!["sepia".into()], "transforms");
        check(
            &|c| {
                c.exclusions.insert("target".into(), vec!["bogus".into()]);
            },
            "exclusions.target",
        );
        check(&|c| c.targets = vec!["source".into()], "targets");
        check(&|c| c.train.batch_size = 1, "train.batch_size");
        check(&|c| c.hparams.lr = -1.0, "hparams.lr");
        check(&|c| c.algorithm = "fish".into(), "algorithm");
        check(&|c| c.algorithm = "coral".into(), "transforms");
        let unknown = MINIMAL.replace("\"source\": \"source\"", "\"source\": \"source\", \"epochz\": 1");
        assert!(ExperimentConfig::from_json(&unknown).unwrap_err().is_validation());
    }

    #[test]
    fn exclusions_drop_per_target() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.transforms = vec!["org".into(), "style_stats".into(), "edge".into()];
        cfg.exclusions.insert("art".into(), vec!["style_stats".into()]);
        assert_eq!(cfg.transforms_for("art"), vec!["org", "edge"]);
        assert_eq!(cfg.transforms_for("photo"), cfg.transforms);
    }
}
