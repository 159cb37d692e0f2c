//! Label-mixing batch transforms. These are the only transforms that turn
//! hard labels into soft ones.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::{Labels, MiniBatch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A uniformly random cyclic permutation (Sattolo), so no index maps to itself.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    Ok(dist.sample(rng))
}

fn mixed_labels(batch: &MiniBatch, lambda: f64, partner: &[usize]) -> Labels {
    let t = batch.targets();
    let c = batch.num_classes;
    let mut out = Tensor::zeros(t.shape());
    for (i, &j) in partner.iter().enumerate() {
        for k in 0..c {
            out.data_mut()[i * c + k] = lambda * t.row(i)[k] + (1.0 - lambda) * t.row(j)[k];
        }
    }
    Labels::Soft(out)
}

fn check_pairable(batch: &MiniBatch, op: &str) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::invalid(
            "batch_size",
            format!("{op} needs at least 2 examples per batch"),
        ));
    }
    Ok(())
}

/// `x_i <- lambda x_i + (1 - lambda) x_partner(i)` with matching soft labels.
pub fn mixup_with(batch: &MiniBatch, lambda: f64, partner: &[usize]) -> MiniBatch {
    let n = batch.len();
    let stride = batch.images.len() / n;
    let mut images = batch.images.clone();
    for (i, &j) in partner.iter().enumerate() {
        let (xi, xj) = (batch.images.item_slice(i), batch.images.item_slice(j));
        for k in 0..stride {
            images.data_mut()[i * stride + k] = lambda * xi[k] + (1.0 - lambda) * xj[k];
        }
    }
    let mut out = batch.with_images(images);
    out.labels = mixed_labels(batch, lambda, partner);
    out
}

#[derive(Debug)]
pub struct Mixup {
    alpha: f64,
    rng: Rng,
}

impl Mixup {
    pub fn new(alpha: f64, rng: Rng) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        Ok(Mixup { alpha, rng })
    }
}

impl PseudoDomainTransform for Mixup {
    fn name(&self) -> &'static str {
        "mixup"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Batch
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        Ok(images.clone())
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        check_pairable(batch, "mixup")?;
        let lambda = beta(self.alpha, &mut self.rng)?;
        let partner = derangement(batch.len(), &mut self.rng);
        Ok(mixup_with(batch, lambda, &partner))
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Box with area ratio about `1 - lambda`, centered uniformly and clipped.
    pub fn draw(h: usize, w: usize, lambda: f64, rng: &mut Rng) -> CutBox {
        let ratio = (1.0 - lambda).max(0.0).sqrt();
        let (ch, cw) = ((h as f64 * ratio) as usize, (w as f64 * ratio) as usize);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        CutBox {
            y0: cy.saturating_sub(ch / 2),
            y1: (cy + ch / 2).min(h),
            x0: cx.saturating_sub(cw / 2),
            x1: (cx + cw / 2).min(w),
        }
    }
}

/// Pastes `bbox` from each partner image; label weight follows the pasted
/// area. Returns the batch and the effective `lambda`.
pub fn cutmix_with(batch: &MiniBatch, bbox: CutBox, partner: &[usize]) -> (MiniBatch, f64) {
    let (h, w) = batch.spatial();
    let mut images = batch.images.clone();
    for (i, &j) in partner.iter().enumerate() {
        for c in 0..3 {
            for y in bbox.y0..bbox.y1 {
                for x in bbox.x0..bbox.x1 {
                    let off = (c * h + y) * w + x;
                    images.item_slice_mut(i)[off] = batch.images.item_slice(j)[off];
                }
            }
        }
    }
    let lambda = 1.0 - bbox.area() as f64 / (h * w) as f64;
    let mut out = batch.with_images(images);
    out.labels = mixed_labels(batch, lambda, partner);
    (out, lambda)
}

#[derive(Debug)]
pub struct CutMix {
    alpha: f64,
    rng: Rng,
}

impl CutMix {
    pub fn new(alpha: f64, rng: Rng) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        Ok(CutMix { alpha, rng })
    }
}

impl PseudoDomainTransform for CutMix {
    fn name(&self) -> &'static str {
        "cutmix"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Batch
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        Ok(images.clone())
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        check_pairable(batch, "cutmix")?;
        let lambda = beta(self.alpha, &mut self.rng)?;
        let partner = derangement(batch.len(), &mut self.rng);
        let (h, w) = batch.spatial();
        let bbox = CutBox::draw(h, w, lambda, &mut self.rng);
        Ok(cutmix_with(batch, bbox, &partner).0)
    }
}
