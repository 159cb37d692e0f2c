//! Closed-form style swap: each image takes on the per-channel mean and
//! standard deviation of a random partner in the batch.

use rand::Rng as _;

use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STYLE_EPS: f64 = 1e-5;

fn plane_stats(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `out_i,c = sd_j,c * (x_i,c - mu_i,c) / max(sd_i,c, eps) + mu_j,c` with
/// `j = partners[i]`.
pub fn style_swap(images: &Tensor, partners: &[usize]) -> Tensor {
    let s = images.shape();
    let hw = s[2] * s[3];
    let stats: Vec<[(f64, f64); 3]> = (0..s[0])
        .map(|i| {
            let item = images.item_slice(i);
            [0, 1, 2].map(|c| plane_stats(&item[c * hw..(c + 1) * hw]))
        })
        .collect();
    let mut out = images.clone();
    for (i, &j) in partners.iter().enumerate() {
        let item = out.item_slice_mut(i);
        for c in 0..3 {
            let ((mu_i, sd_i), (mu_j, sd_j)) = (stats[i][c], stats[j][c]);
            for v in &mut item[c * hw..(c + 1) * hw] {
                *v = sd_j * (*v - mu_i) / sd_i.max(STYLE_EPS) + mu_j;
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct StyleStats {
    rng: Rng,
}

impl StyleStats {
    pub fn new(rng: Rng) -> Self {
        StyleStats { rng }
    }
}

impl PseudoDomainTransform for StyleStats {
    fn name(&self) -> &'static str {
        "style_stats"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Batch
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        Ok(images.clone())
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::invalid(
                "batch_size",
                "style_stats needs at least 2 examples per batch",
            ));
        }
        let partners: Vec<usize> = (0..b)
            .map(|i| {
                let j = self.rng.random_range(0..b - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        Ok(batch.with_images(style_swap(&batch.images, &partners)))
    }
}
