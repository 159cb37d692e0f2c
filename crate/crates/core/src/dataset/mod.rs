//! Multi-domain labeled image datasets and the split/subsample operations the
//! training protocols use.

mod batching;
mod folder;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub use batching::{eval_batches, make_minibatches, AugmentConfig, BatchOptions};
pub use folder::{load_image_folder, write_image_folder, write_image_grid};
pub use synthetic::{
    even_hues, generate_synthetic, Background, SyntheticDomain, SyntheticShiftSpec, SHAPE_NAMES,
};
pub use folder::tensor_to_rgb;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Stable identity within the dataset it was created in.
    pub id: usize,
    /// `[3, h, w]` raw values in `[0, 1]`.
    pub image: Arc<Tensor>,
    pub label: usize,
    pub domain: String,
    /// Rendered foreground color index, for synthetic data.
    pub color_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub domains: Vec<String>,
    pub examples: Vec<LabeledExample>,
    pub class_names: Vec<String>,
}

/// Training and held-out validation partitions of one dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: DomainDataset,
    pub val: DomainDataset,
}

impl DomainDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `[3, h, w]` of the first example.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.examples.first().map(|e| e.image.shape())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let shape = self.image_shape().map(<[usize]>::to_vec);
        for e in &self.examples {
            if !self.domains.contains(&e.domain) || e.domain.is_empty() {
                return Err(Error::Data(format!(
                    "example {} has unknown domain `{}`",
                    e.id, e.domain
                )));
            }
            if e.label >= c {
                return Err(Error::Data(format!(
                    "example {} has label {} but only {c} classes",
                    e.id, e.label
                )));
            }
            if Some(e.image.shape()) != shape.as_deref() || e.image.shape()[0] != 3 {
                return Err(Error::Data(format!("example {} has image shape {:?}", e.id, e.image.shape())));
            }
            if !e.image.is_finite() {
                return Err(Error::Data(format!("example {} has non-finite pixels", e.id)));
            }
        }
        Ok(())
    }

    /// Same metadata with a different example list.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> DomainDataset {
        DomainDataset {
            name: self.name.clone(),
            domains: self.domains.clone(),
            examples,
            class_names: self.class_names.clone(),
        }
    }

    /// Restricts the dataset to the named domains, in the given order.
    pub fn filter_domains(&self, names: &[String]) -> Result<DomainDataset> {
        for n in names {
            if !self.domains.contains(n) {
                return Err(Error::Unknown {
                    kind: "domain",
                    name: n.clone(),
                    registered: self.domains.join(", "),
                });
            }
        }
        let set: BTreeSet<&String> = names.iter().collect();
        Ok(DomainDataset {
            name: self.name.clone(),
            domains: names.to_vec(),
            examples: self
                .examples
                .iter()
                .filter(|e| set.contains(&e.domain))
                .cloned()
                .collect(),
            class_names: self.class_names.clone(),
        })
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.domains.iter().map(|d| (d.clone(), 0)).collect();
        for e in &self.examples {
            *counts.entry(e.domain.clone()).or_default() += 1;
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Example indices grouped by class, in dataset order.
    fn indices_by_class(&self, domain: Option<&str>) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, e) in self.examples.iter().enumerate() {
            if domain.map_or(true, |d| e.domain == d) {
                by_class[e.label].push(i);
            }
        }
        by_class
    }
}

/// Per-domain, per-class stratified holdout split.
///
/// Each class in each domain with `n` examples contributes
/// `clamp(round(n * holdout_fraction), 1, n - 1)` examples to validation.
/// Both partitions keep dataset order.
pub fn split_in_domain(ds: &DomainDataset, holdout_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 0.5) {
        return Err(Error::invalid(
            "holdout_fraction",
            format!("must lie in (0, 0.5), got {holdout_fraction}"),
        ));
    }
    let mut rng = rng::stream(seed, streams::SPLIT);
    let mut in_val = vec![false; ds.len()];
    for domain in &ds.domains {
        for (class, mut idx) in ds.indices_by_class(Some(domain)).into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            if idx.len() < 2 {
                return Err(Error::Data(format!(
                    "class `{}` in domain `{domain}` has fewer than 2 examples",
                    ds.class_names[class]
                )));
            }
            let n = idx.len();
            let n_val = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
            idx.shuffle(&mut rng);
            for &i in &idx[..n_val] {
                in_val[i] = true;
            }
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (e, &v) in ds.examples.iter().zip(&in_val) {
        if v {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok(SplitPair {
        train: ds.with_examples(train),
        val: ds.with_examples(val),
    })
}

/// Splits `total` into `parts` near-equal shares, remainders going to the
/// first shares.
pub fn balanced_shares(total: usize, parts: usize) -> Vec<usize> {
    let (base, rem) = (total / parts, total % parts);
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Class quotas as even as availability permits; the remainder goes to the
/// lowest class indices first.
fn class_quotas(n: usize, available: &[usize]) -> Vec<usize> {
    let mut quotas = vec![0; available.len()];
    let mut remaining = n;
    loop {
        let open: Vec<usize> = (0..available.len())
            .filter(|&c| quotas[c] < available[c])
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let shares = balanced_shares(remaining, open.len());
        let mut assigned = 0;
        for (&c, share) in open.iter().zip(shares) {
            let take = share.min(available[c] - quotas[c]);
            quotas[c] += take;
            assigned += take;
        }
        remaining -= assigned;
        if assigned == 0 {
            break;
        }
    }
    quotas
}

/// Draws exactly `n` examples without replacement, stratified by class.
pub fn subsample(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(
            "n",
            format!("must be in 1..={}, got {n}", ds.len()),
        ));
    }
    let by_class = ds.indices_by_class(None);
    let available: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = class_quotas(n, &available);
    let mut rng = rng::stream(seed, streams::SUBSAMPLE);
    let mut keep = vec![false; ds.len()];
    for (mut idx, q) in by_class.into_iter().zip(quotas) {
        idx.shuffle(&mut rng);
        for &i in &idx[..q] {
            keep[i] = true;
        }
    }
    let examples = ds
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(ds.with_examples(examples))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `per_domain` examples per domain, labels cycling through `classes`,
    /// each image filled with a value encoding its id.
    pub fn toy(domains: &[&str], per_domain: usize, classes: usize, size: usize) -> DomainDataset {
        let mut examples = Vec::new();
        for d in domains {
            for i in 0..per_domain {
                let id = examples.len();
                examples.push(LabeledExample {
                    id,
                    image: Arc::new(Tensor::full(&[3, size, size], (id % 97) as f64 / 97.0)),
                    label: i % classes,
                    domain: d.to_string(),
                    color_index: None,
                });
            }
        }
        DomainDataset {
            name: "toy".into(),
            domains: domains.iter().map(|d| d.to_string()).collect(),
            examples,
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::toy;
    use super::*;
    use proptest::prelude::*;

    fn ids(ds: &DomainDataset) -> Vec<usize> {
        ds.examples.iter().map(|e| e.id).collect()
    }

    #[test]
    fn split_single_domain_counts() {
        let ds = toy(&["a"], 100, 2, 4);
        let sp = split_in_domain(&ds, 0.2, 3).unwrap();
        assert_eq!((sp.train.len(), sp.val.len()), (80, 20));
        assert_eq!(sp.val.class_counts(), vec![10, 10]);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(&["a"], 100, 2, 4);
        let a = split_in_domain(&ds, 0.2, 3).unwrap();
        let b = split_in_domain(&ds, 0.2, 3).unwrap();
        assert_eq!(ids(&a.val), ids(&b.val));
        let c = split_in_domain(&ds, 0.2, 4).unwrap();
        assert_ne!(ids(&a.val), ids(&c.val));
    }

    #[test]
    fn split_each_domain_independently() {
        let ds = toy(&["a", "b"], 50, 2, 4);
        let sp = split_in_domain(&ds, 0.2, 0).unwrap();
        for d in ["a", "b"] {
            assert_eq!(sp.train.domain_counts()[d], 40);
            assert_eq!(sp.val.domain_counts()[d], 10);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let mut ds = toy(&["a"], 4, 2, 4);
        ds.examples[1].label = 0;
        ds.examples[3].label = 0;
        ds.examples[0].label = 1;
        let err = split_in_domain(&ds, 0.2, 0).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = toy(&["a"], 10, 2, 4);
        assert!(split_in_domain(&ds, 0.5, 0).is_err());
        assert!(split_in_domain(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn subsample_identity_and_stratification() {
        let ds = toy(&["a"], 100, 2, 4);
        let all = subsample(&ds, 100, 1).unwrap();
        assert_eq!(ids(&all), ids(&ds));
        assert_eq!(subsample(&ds, 30, 1).unwrap().class_counts(), vec![15, 15]);
        assert_eq!(subsample(&ds, 31, 1).unwrap().class_counts(), vec![16, 15]);
        assert!(subsample(&ds, 101, 1).is_err());
    }

    #[test]
    fn subsample_fills_from_other_classes_when_one_runs_short() {
        let mut ds = toy(&["a"], 20, 2, 4);
        for (i, e) in ds.examples.iter_mut().enumerate() {
            e.label = usize::from(i >= 16);
        }
        // 16 of class 0, 4 of class 1
        assert_eq!(subsample(&ds, 12, 0).unwrap().class_counts(), vec![8, 4]);
    }

    #[test]
    fn balanced_shares_put_remainder_first() {
        assert_eq!(balanced_shares(91, 3), vec![31, 30, 30]);
        assert_eq!(balanced_shares(92, 3), vec![31, 31, 30]);
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 6usize..60, frac in 0.05f64..0.45, seed in 0u64..1000) {
            let ds = toy(&["a", "b"], n, 3, 2);
            let sp = split_in_domain(&ds, frac, seed).unwrap();
            let mut all: Vec<usize> = ids(&sp.train);
            all.extend(ids(&sp.val));
            all.sort_unstable();
            prop_assert_eq!(all, ids(&ds));
            for e in sp.train.examples.iter().chain(&sp.val.examples) {
                let orig = &ds.examples[e.id];
                prop_assert_eq!(e.label, orig.label);
                prop_assert_eq!(&e.domain, &orig.domain);
            }
        }

        #[test]
        fn subsample_exact_size(n in 1usize..=60, seed in 0u64..1000) {
            let ds = toy(&["a"], 60, 4, 2);
            let sub = subsample(&ds, n, seed).unwrap();
            prop_assert_eq!(sub.len(), n);
            let counts = sub.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
