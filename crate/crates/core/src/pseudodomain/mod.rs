//! Pseudo-domain generation: a two-level transform interface, the built-in
//! transform catalogue, and application of a transform set to a mini-batch.

pub mod augmix;
pub mod edge;
pub mod mixing;
pub mod pixel_ops;
pub mod preview;
pub mod rand_conv;
pub mod style;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub use augmix::{AugMixLite, IpMixLite};
pub use edge::EdgeSketch;
pub use mixing::{CutMix, Mixup};
pub use pixel_ops::PixelPolicy;
pub use rand_conv::RandConv;
pub use style::StyleStats;

/// Registered transform names, in registry order.
pub const REGISTRY: [&str; 10] = [
    "org",
    "mixup",
    "cutmix",
    "rand_conv",
    "augmix_lite",
    "ipmix_lite",
    "randaugment_lite",
    "trivialaugment_lite",
    "edge",
    "style_stats",
];

/// Which of the two interface methods carries the transform's effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformLevel {
    Dataset,
    Batch,
    Both,
}

/// Unnormalized `[n, 3, h, w]` images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages(pub Tensor);

/// Every transform answers both levels; the level it does not use is the
/// identity.
pub trait PseudoDomainTransform: Send + Debug {
    fn name(&self) -> &'static str;
    fn level(&self) -> TransformLevel;
    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages>;
    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch>;
}

/// Runs a raw-level transform on a normalized batch by de-normalizing a copy.
pub(crate) fn via_raw<T: PseudoDomainTransform + ?Sized>(
    op: &mut T,
    batch: &MiniBatch,
) -> Result<MiniBatch> {
    let raw = RawImages(batch.raw_images());
    let mut out = op.apply_raw(&raw)?.0;
    batch.normalizer.normalize(&mut out);
    Ok(batch.with_images(out))
}

#[derive(Debug, Default)]
pub struct Org;

impl PseudoDomainTransform for Org {
    fn name(&self) -> &'static str {
        "org"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Both
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        Ok(images.clone())
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        Ok(batch.clone())
    }
}

/// Per-transform parameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub rand_conv_kernel_sizes: Vec<usize>,
    pub rand_conv_mix_prob: f64,
    pub augmix_severity: u32,
    pub augmix_width: usize,
    pub augmix_depth: usize,
    pub augmix_alpha: f64,
    pub ipmix_severity: u32,
    pub ipmix_mixing_set_size: usize,
    pub randaugment_n_ops: usize,
    pub randaugment_magnitude: u32,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            mixup_alpha: 0.2,
            cutmix_alpha: 1.0,
            rand_conv_kernel_sizes: vec![1, 3, 5, 7],
            rand_conv_mix_prob: 0.5,
            augmix_severity: 3,
            augmix_width: 3,
            augmix_depth: 3,
            augmix_alpha: 1.0,
            ipmix_severity: 3,
            ipmix_mixing_set_size: 16,
            randaugment_n_ops: 2,
            randaugment_magnitude: 9,
        }
    }
}

fn param_key(err: Error, prefix: &str) -> Error {
    match err {
        Error::Invalid { key, message } => Error::Invalid {
            key: format!("transform_params.{prefix}{key}"),
            message,
        },
        other => other,
    }
}

/// Builds one registered transform drawing from `rng`.
pub fn build_transform(
    name: &str,
    params: &TransformParams,
    seed: u64,
    rng: rng::Rng,
) -> Result<Box<dyn PseudoDomainTransform>> {
    let p = params;
    let op: Box<dyn PseudoDomainTransform> = match name {
        "org" => Box::new(Org),
        "mixup" => Box::new(Mixup::new(p.mixup_alpha, rng).map_err(|e| param_key(e, "mixup_"))?),
        "cutmix" => Box::new(CutMix::new(p.cutmix_alpha, rng).map_err(|e| param_key(e, "cutmix_"))?),
        "rand_conv" => Box::new(
            RandConv::new(p.rand_conv_kernel_sizes.clone(), p.rand_conv_mix_prob, rng)
                .map_err(|e| param_key(e, "rand_conv_"))?,
        ),
        "augmix_lite" => Box::new(
            AugMixLite::new(p.augmix_severity, p.augmix_width, p.augmix_depth, p.augmix_alpha, rng)
                .map_err(|e| param_key(e, "augmix_"))?,
        ),
        "ipmix_lite" => Box::new(
            IpMixLite::new(p.ipmix_severity, p.ipmix_mixing_set_size, seed, rng)
                .map_err(|e| param_key(e, "ipmix_"))?,
        ),
        "randaugment_lite" => {
            if p.randaugment_magnitude > pixel_ops::MAX_MAGNITUDE {
                return Err(Error::invalid(
                    "transform_params.randaugment_magnitude",
                    format!("must be <= {}", pixel_ops::MAX_MAGNITUDE),
                ));
            }
            Box::new(PixelPolicy::randaugment(p.randaugment_n_ops, p.randaugment_magnitude, rng))
        }
        "trivialaugment_lite" => Box::new(PixelPolicy::trivialaugment(rng)),
        "edge" => Box::new(EdgeSketch),
        "style_stats" => Box::new(StyleStats::new(rng)),
        other => {
            return Err(Error::Unknown {
                kind: "transform".into(),
                name: other.into(),
                registered: REGISTRY.join(", "),
            })
        }
    };
    Ok(op)
}

/// The ordered multiset of transforms `[O_1 .. O_K]` for one run.
#[derive(Debug)]
pub struct TransformSet {
    ops: Vec<Box<dyn PseudoDomainTransform>>,
    applications: u64,
}

pub fn make_transform_set(names: &[String], seed: u64) -> Result<TransformSet> {
    make_transform_set_with(names, seed, &TransformParams::default())
}

/// Slot `k` draws from its own stream derived from `(seed, k)`, so duplicate
/// names get independent draws.
pub fn make_transform_set_with(
    names: &[String],
    seed: u64,
    params: &TransformParams,
) -> Result<TransformSet> {
    if names.is_empty() {
        return Err(Error::invalid("transforms", "empty transform set"));
    }
    let ops = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let rng = rng::stream(seed, streams::TRANSFORM_BASE + k as u64);
            build_transform(name, params, seed, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformSet {
        ops,
        applications: 0,
    })
}

impl TransformSet {
    pub fn k(&self) -> usize {
        self.ops.len()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|o| o.name()).collect()
    }

    /// Total single-transform applications so far.
    pub fn applications(&self) -> u64 {
        self.applications
    }

    /// `[O_1(batch) .. O_K(batch)]`, the k-th tagged `pseudo:<name>:<k>`.
    pub fn apply(&mut self, batch: &MiniBatch) -> Result<Vec<MiniBatch>> {
        let mut out = Vec::with_capacity(self.ops.len());
        for (k, op) in self.ops.iter_mut().enumerate() {
            let mut b = op.apply_batch(batch)?;
            b.domain_tag = format!("pseudo:{}:{k}", op.name());
            b.provenance.transforms.push(op.name().to_string());
            self.applications += 1;
            out.push(b);
        }
        Ok(out)
    }
}

pub fn apply_set(set: &mut TransformSet, batch: &MiniBatch) -> Result<Vec<MiniBatch>> {
    set.apply(batch)
}
