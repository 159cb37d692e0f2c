//! Random convolution: a freshly sampled 3-in/3-out filter bank applied to
//! the whole batch, then re-standardized to the input's channel statistics.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Channels whose output std falls below this are shifted but not rescaled.
const DEGENERATE_STD: f64 = 1e-6;

#[derive(Debug)]
pub struct RandConv {
    kernel_sizes: Vec<usize>,
    mix_prob: f64,
    rng: Rng,
}

impl RandConv {
    pub fn new(kernel_sizes: Vec<usize>, mix_prob: f64, rng: Rng) -> Result<Self> {
        if kernel_sizes.is_empty() {
            return Err(Error::invalid("kernel_sizes", "must not be empty"));
        }
        if let Some(k) = kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid(
                "kernel_sizes",
                format!("kernel sizes must be odd, got {k}"),
            ));
        }
        if !(0.0..=1.0).contains(&mix_prob) {
            return Err(Error::invalid("mix_prob", "must be in [0, 1]"));
        }
        Ok(RandConv {
            kernel_sizes,
            mix_prob,
            rng,
        })
    }
}

/// Gaussian filter bank `[3, 3, k, k]` with variance `1 / (3 k^2)`.
pub fn sample_kernel(k: usize, rng: &mut Rng) -> Tensor {
    let std = (1.0 / (k * k * 3) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..9 * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![3, 3, k, k], data).expect("kernel shape")
}

/// Convolution with replicate padding, no bias.
fn convolve(images: &Tensor, kernel: &Tensor) -> Tensor {
    let s = images.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let k = kernel.shape()[2];
    let pad = (k / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Tensor::zeros(s);
    for img in 0..n {
        let src = images.item_slice(img);
        let mut dst = vec![0.0; 3 * h * w];
        for o in 0..3 {
            for i in 0..3 {
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kernel.data()[((o * 3 + i) * k + ky) * k + kx];
                        for y in 0..h {
                            let sy = clamp(y as isize + ky as isize - pad, h);
                            let row = &src[(i * h + sy) * w..(i * h + sy + 1) * w];
                            let drow = &mut dst[(o * h + y) * w..(o * h + y + 1) * w];
                            for (x, d) in drow.iter_mut().enumerate() {
                                *d += wgt * row[clamp(x as isize + kx as isize - pad, w)];
                            }
                        }
                    }
                }
            }
        }
        out.item_slice_mut(img).copy_from_slice(&dst);
    }
    out
}

fn channel_stats(images: &Tensor) -> [(f64, f64); 3] {
    let s = images.shape();
    let hw = s[2] * s[3];
    let mut stats = [(0.0, 0.0); 3];
    for (c, st) in stats.iter_mut().enumerate() {
        let vals = (0..s[0]).flat_map(|i| images.item_slice(i)[c * hw..(c + 1) * hw].iter());
        let count = (s[0] * hw) as f64;
        let mean = vals.clone().sum::<f64>() / count;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        *st = (mean, var.sqrt());
    }
    stats
}

/// Applies `kernel`, optionally blends `mix * input + (1 - mix) * output`,
/// then matches each output channel's batch mean/std to the input's.
pub fn rand_conv_with(images: &Tensor, kernel: &Tensor, mix: Option<f64>) -> Tensor {
    let mut out = convolve(images, kernel);
    if let Some(lambda) = mix {
        out = images.zip_map(&out, |x, y| lambda * x + (1.0 - lambda) * y);
    }
    let target = channel_stats(images);
    let actual = channel_stats(&out);
    let s = out.shape().to_vec();
    let hw = s[2] * s[3];
    for i in 0..s[0] {
        let item = out.item_slice_mut(i);
        for c in 0..3 {
            let ((mu_x, sd_x), (mu_y, sd_y)) = (target[c], actual[c]);
            for v in &mut item[c * hw..(c + 1) * hw] {
                *v = if sd_y < DEGENERATE_STD {
                    *v - mu_y + mu_x
                } else {
                    (*v - mu_y) / sd_y * sd_x + mu_x
                };
            }
        }
    }
    out
}

impl PseudoDomainTransform for RandConv {
    fn name(&self) -> &'static str {
        "rand_conv"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Batch
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        Ok(images.clone())
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        let k = self.kernel_sizes[self.rng.random_range(0..self.kernel_sizes.len())];
        let kernel = sample_kernel(k, &mut self.rng);
        let mix = self
            .rng
            .random_bool(self.mix_prob)
            .then(|| self.rng.random_range(0.0..1.0));
        Ok(batch.with_images(rand_conv_with(&batch.images, &kernel, mix)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch_images() -> Tensor {
        let data = (0..2 * 3 * 5 * 5)
            .map(|i| ((i * 13) % 17) as f64 / 8.0 - 1.0)
            .collect();
        Tensor::new(vec![2, 3, 5, 5], data).unwrap()
    }

    #[test]
    fn identity_kernel_round_trips() {
        let mut kernel = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            kernel.data_mut()[c * 3 + c] = 1.0;
        }
        let x = batch_images();
        let out = rand_conv_with(&x, &kernel, None);
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_zero_stays_zero() {
        let x = Tensor::zeros(&[2, 3, 4, 4]);
        let mut r = rng::stream(2, 0);
        for k in [1, 3, 5] {
            let out = rand_conv_with(&x, &sample_kernel(k, &mut r), Some(0.4));
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::full(&[1, 3, 4, 4], 0.3);
        let mut r = rng::stream(4, 0);
        let out = convolve(&x, &sample_kernel(3, &mut r));
        for c in 0..3 {
            let plane = &out.data()[c * 16..(c + 1) * 16];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn same_stream_state_same_output() {
        let x = batch_images();
        let b = MiniBatch::new(x, crate::batch::Labels::Hard(vec![0, 1]), 2, "d").unwrap();
        let mut a1 = RandConv::new(vec![1, 3, 5, 7], 0.5, rng::stream(8, 1)).unwrap();
        let mut a2 = RandConv::new(vec![1, 3, 5, 7], 0.5, rng::stream(8, 1)).unwrap();
        let o1 = a1.apply_batch(&b).unwrap();
        assert_eq!(o1.images, a2.apply_batch(&b).unwrap().images);
        assert_eq!(o1.labels, b.labels);
        assert_ne!(o1.images, a1.apply_batch(&b).unwrap().images);
    }

    #[test]
    fn output_matches_input_channel_statistics() {
        let x = batch_images();
        let mut r = rng::stream(5, 0);
        let out = rand_conv_with(&x, &sample_kernel(3, &mut r), None);
        let (a, b) = (channel_stats(&x), channel_stats(&out));
        for c in 0..3 {
            assert!((a[c].0 - b[c].0).abs() < 1e-9 && (a[c].1 - b[c].1).abs() < 1e-9);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(RandConv::new(vec![3, 4], 0.5, rng::stream(0, 0)).is_err());
    }
}
