//! Mini-batches of normalized images with hard or soft labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization applied at batch assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalizer {
    /// Raw `[.., 3, h, w]` values in `[0, 1]` to normalized values, in place.
    pub fn normalize(&self, images: &mut Tensor) {
        self.apply(images, |v, m, s| (v - m) / s);
    }

    pub fn denormalize(&self, images: &mut Tensor) {
        self.apply(images, |v, m, s| v * s + m);
    }

    /// Normalized value corresponding to raw value `raw` in channel `c`.
    pub fn normalized_value(&self, c: usize, raw: f64) -> f64 {
        (raw - self.mean[c]) / self.std[c]
    }

    fn apply(&self, images: &mut Tensor, f: impl Fn(f64, f64, f64) -> f64) {
        let s = images.shape();
        let hw: usize = s[s.len() - 2..].iter().product();
        for (i, plane) in images.data_mut().chunks_mut(hw).enumerate() {
            let c = i % 3;
            for v in plane {
                *v = f(*v, self.mean[c], self.std[c]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Hard(Vec<usize>),
    /// `[b, C]` rows on the probability simplex.
    Soft(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, Labels::Soft(_))
    }

    /// Target distribution matrix `[b, num_classes]`.
    pub fn targets(&self, num_classes: usize) -> Tensor {
        match self {
            Labels::Hard(v) => {
                let mut t = Tensor::zeros(&[v.len(), num_classes]);
                for (i, &y) in v.iter().enumerate() {
                    t.data_mut()[i * num_classes + y] = 1.0;
                }
                t
            }
            Labels::Soft(t) => t.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Hard(v) => Labels::Hard(indices.iter().map(|&i| v[i]).collect()),
            Labels::Soft(t) => Labels::Soft(t.select(indices)),
        }
    }
}

/// What has been applied to a batch's images since they left the dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub default_augmented: bool,
    pub transforms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    /// `[b, 3, h, w]`, normalized.
    pub images: Tensor,
    pub labels: Labels,
    pub num_classes: usize,
    pub domain_tag: String,
    pub normalizer: Normalizer,
    pub provenance: Provenance,
}

impl MiniBatch {
    pub fn new(
        images: Tensor,
        labels: Labels,
        num_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let batch = MiniBatch {
            images,
            labels,
            num_classes,
            domain_tag: domain_tag.into(),
            normalizer: Normalizer::default(),
            provenance: Provenance::default(),
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h, w)` of the images.
    pub fn spatial(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn targets(&self) -> Tensor {
        self.labels.targets(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 {
            return Err(Error::shape("MiniBatch", format!("images {s:?}")));
        }
        if self.labels.len() != s[0] {
            return Err(Error::shape(
                "MiniBatch",
                format!("{} labels for {} images", self.labels.len(), s[0]),
            ));
        }
        match &self.labels {
            Labels::Hard(v) => {
                if let Some(bad) = v.iter().find(|&&y| y >= self.num_classes) {
                    return Err(Error::invalid(
                        "labels",
                        format!("label {bad} >= {} classes", self.num_classes),
                    ));
                }
            }
            Labels::Soft(t) => {
                if t.shape() != [s[0], self.num_classes] {
                    return Err(Error::shape("MiniBatch", "soft label shape"));
                }
                for i in 0..s[0] {
                    let row = t.row(i);
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                        return Err(Error::invalid(
                            "labels",
                            format!("soft label row {i} is not a distribution"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy of the images mapped back to raw `[0, 1]` space.
    pub fn raw_images(&self) -> Tensor {
        let mut raw = self.images.clone();
        self.normalizer.denormalize(&mut raw);
        raw
    }

    /// Returns a batch with the same labels and bookkeeping but new images.
    pub fn with_images(&self, images: Tensor) -> MiniBatch {
        MiniBatch {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
            normalizer: self.normalizer,
            provenance: self.provenance.clone(),
        }
    }
}
