//! Sketch-style pseudo-domain from Sobel edge magnitudes.

use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::MiniBatch;
use crate::error::Result;
use crate::tensor::Tensor;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Rec. 601 luma of a raw `[3, h, w]` image.
pub fn luminance(image: &Tensor) -> Vec<f64> {
    let hw = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..hw)
        .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
        .collect()
}

/// `sqrt(Gx^2 + Gy^2)` of a single plane with replicate padding.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = at(y + dy as isize - 1, x + dx as isize - 1);
                    gx += SOBEL_X[dy][dx] * v;
                    gy += SOBEL_Y[dy][dx] * v;
                }
            }
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Dark strokes on a white background: `1 - magnitude / max(magnitude)` on
/// all three channels. Flat images map to plain white.
pub fn edge_sketch(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mag = sobel_magnitude(&luminance(image), h, w);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(mag.iter().map(|&m| if max > 1e-12 { 1.0 - m / max } else { 1.0 }));
    }
    Tensor::new(vec![3, h, w], data).expect("sketch shape")
}

#[derive(Debug, Default)]
pub struct EdgeSketch;

impl PseudoDomainTransform for EdgeSketch {
    fn name(&self) -> &'static str {
        "edge"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Dataset
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        let n = images.0.shape()[0];
        let shape = images.0.shape()[1..].to_vec();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = Tensor::new(shape.clone(), images.0.item_slice(i).to_vec())?;
            out.push(edge_sketch(&img));
        }
        Ok(RawImages(Tensor::stack(&out)?))
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        super::via_raw(self, batch)
    }
}
