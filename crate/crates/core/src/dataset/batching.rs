use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::batch::{Labels, MiniBatch, Normalizer, Provenance};
use crate::error::{Error, Result};
use crate::rng::{self, mix_seed, streams, Rng};
use crate::tensor::Tensor;

/// Default training augmentation: zero-padded random crop plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_padding: 4,
            horizontal_flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchOptions {
    pub augment: AugmentConfig,
    pub normalizer: Normalizer,
}

fn domain_tag(ds: &DomainDataset, idx: &[usize]) -> String {
    let first = &ds.examples[idx[0]].domain;
    if idx.iter().all(|&i| &ds.examples[i].domain == first) {
        first.clone()
    } else {
        "mixed".into()
    }
}

fn assemble(
    ds: &DomainDataset,
    idx: &[usize],
    normalizer: Normalizer,
    mut augment: Option<(&AugmentConfig, &mut Rng)>,
) -> Result<MiniBatch> {
    let mut images = Vec::with_capacity(idx.len());
    for &i in idx {
        let img = &ds.examples[i].image;
        images.push(match augment.as_mut() {
            Some((cfg, rng)) => augment_one(img, cfg, rng),
            None => (**img).clone(),
        });
    }
    let mut images = Tensor::stack(&images)?;
    normalizer.normalize(&mut images);
    let labels = Labels::Hard(idx.iter().map(|&i| ds.examples[i].label).collect());
    let mut batch = MiniBatch::new(images, labels, ds.num_classes(), domain_tag(ds, idx))?;
    batch.normalizer = normalizer;
    batch.provenance = Provenance {
        default_augmented: augment.is_some(),
        transforms: Vec::new(),
    };
    Ok(batch)
}

fn augment_one(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let p = cfg.crop_padding as i64;
    let dy = (rng.random_range(0..=2 * p) - p) as isize;
    let dx = (rng.random_range(0..=2 * p) - p) as isize;
    let flip = cfg.horizontal_flip && rng.random_bool(0.5);
    let mut out = Tensor::zeros(img.shape());
    for c in 0..3 {
        for y in 0..h as isize {
            let sy = y + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let xx = if flip { w as isize - 1 - x } else { x };
                let sx = xx + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out.data_mut()[(c * h + y as usize) * w + x as usize] =
                    img.data()[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Shuffled training batches for one epoch; the final partial batch is
/// dropped. The permutation and augmentation draws depend only on
/// `(seed, epoch)`.
pub fn make_minibatches(
    ds: &DomainDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    opts: &BatchOptions,
) -> Result<Vec<MiniBatch>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size", "must be at least 2"));
    }
    if ds.len() < batch_size {
        return Err(Error::Data(format!(
            "dataset has {} examples, fewer than batch size {batch_size}",
            ds.len()
        )));
    }
    let mut rng = rng::stream(mix_seed(seed, &[epoch]), streams::BATCHES);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .map(|idx| {
            let aug = opts.augment.enabled.then_some((&opts.augment, &mut rng));
            assemble(ds, idx, opts.normalizer, aug)
        })
        .collect()
}

/// In-order, unaugmented batches covering every example (the last one may be
/// short). Used for validation and test evaluation.
pub fn eval_batches(ds: &DomainDataset, batch_size: usize, normalizer: Normalizer) -> Result<Vec<MiniBatch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    order
        .chunks(batch_size)
        .map(|idx| assemble(ds, idx, normalizer, None))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::toy;
    use super::*;

    fn label_order(batches: &[MiniBatch]) -> Vec<Vec<f64>> {
        batches.iter().map(|b| b.images.data().to_vec()).collect()
    }

    #[test]
    fn drops_partial_batch() {
        let ds = toy(&["a"], 10, 2, 4);
        let b = make_minibatches(&ds, 4, 0, 0, &BatchOptions::default()).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let ds = toy(&["a"], 40, 2, 8);
        let opts = BatchOptions::default();
        let a = make_minibatches(&ds, 8, 5, 0, &opts).unwrap();
        let b = make_minibatches(&ds, 8, 5, 0, &opts).unwrap();
        assert_eq!(label_order(&a), label_order(&b));
        let c = make_minibatches(&ds, 8, 5, 1, &opts).unwrap();
        assert_ne!(label_order(&a), label_order(&c));
    }

    #[test]
    fn epochs_permute_differently() {
        let ds = toy(&["a"], 64, 2, 4);
        let opts = BatchOptions {
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        // pixel values encode the example id
        let ids = |e: u64| -> Vec<f64> {
            make_minibatches(&ds, 8, 1, e, &opts)
                .unwrap()
                .iter()
                .flat_map(|b| (0..b.len()).map(|i| b.images.item_slice(i)[0]).collect::<Vec<_>>())
                .collect()
        };
        assert_ne!(ids(0), ids(1));
    }

    #[test]
    fn rejects_small_inputs() {
        let ds = toy(&["a"], 3, 2, 4);
        assert!(make_minibatches(&ds, 4, 0, 0, &BatchOptions::default()).is_err());
        assert!(make_minibatches(&ds, 1, 0, 0, &BatchOptions::default()).is_err());
    }

    #[test]
    fn eval_batches_are_clean_and_complete() {
        let ds = toy(&["a"], 10, 2, 4);
        let b = eval_batches(&ds, 4, Normalizer::default()).unwrap();
        assert_eq!(b.iter().map(MiniBatch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(b.iter().all(|x| !x.provenance.default_augmented));
        // normalized with mean 0.5 / std 0.5
        let raw = ds.examples[0].image.data()[0];
        assert!((b[0].images.data()[0] - (raw - 0.5) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_padding_crop_keeps_shape() {
        let img = Tensor::full(&[3, 6, 6], 1.0);
        let cfg = AugmentConfig::default();
        let mut rng = rng::stream(0, 0);
        for _ in 0..20 {
            let out = augment_one(&img, &cfg, &mut rng);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
