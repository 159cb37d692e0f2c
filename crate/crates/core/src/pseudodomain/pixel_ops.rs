//! Raw-image pixel operations shared by the policy-based transforms
//! (RandAugment/TrivialAugment style) and the AugMix/IPMix chains.
//!
//! Images are `[3, h, w]` tensors with values in `[0, 1]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelOp {
    Identity,
    AutoContrast,
    Equalize,
    Posterize,
    Solarize,
    Brightness,
    Contrast,
    Saturation,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl PixelOp {
    pub const POOL: [PixelOp; 13] = [
        PixelOp::Identity,
        PixelOp::AutoContrast,
        PixelOp::Equalize,
        PixelOp::Posterize,
        PixelOp::Solarize,
        PixelOp::Brightness,
        PixelOp::Contrast,
        PixelOp::Saturation,
        PixelOp::Rotate,
        PixelOp::ShearX,
        PixelOp::ShearY,
        PixelOp::TranslateX,
        PixelOp::TranslateY,
    ];

    pub fn sample(rng: &mut Rng) -> PixelOp {
        PixelOp::POOL[rng.random_range(0..PixelOp::POOL.len())]
    }
}

/// One parameterized application of a [`PixelOp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStep {
    pub op: PixelOp,
    /// In `[0, 1]`.
    pub strength: f64,
    /// `+1` or `-1`; sets the direction of signed ops.
    pub sign: f64,
}

impl PixelStep {
    pub fn identity() -> Self {
        PixelStep {
            op: PixelOp::Identity,
            strength: 0.0,
            sign: 1.0,
        }
    }

    pub fn random(rng: &mut Rng, strength: f64) -> Self {
        PixelStep {
            op: PixelOp::sample(rng),
            strength,
            sign: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        }
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        let (s, sign) = (self.strength.clamp(0.0, 1.0), self.sign);
        let size = img.shape()[1].min(img.shape()[2]) as f64;
        match self.op {
            PixelOp::Identity => img.clone(),
            PixelOp::AutoContrast => autocontrast(img),
            PixelOp::Equalize => equalize(img),
            PixelOp::Posterize => posterize(img, 8 - (4.0 * s).round() as u32),
            PixelOp::Solarize => solarize(img, 1.0 - s),
            PixelOp::Brightness => brightness(img, 1.0 + sign * 0.9 * s),
            PixelOp::Contrast => contrast(img, 1.0 + sign * 0.9 * s),
            PixelOp::Saturation => saturation(img, 1.0 + sign * 0.9 * s),
            PixelOp::Rotate => rotate(img, sign * 30.0 * s),
            PixelOp::ShearX => affine(img, [1.0, sign * 0.3 * s, 0.0, 1.0], [0.0, 0.0]),
            PixelOp::ShearY => affine(img, [1.0, 0.0, sign * 0.3 * s, 1.0], [0.0, 0.0]),
            PixelOp::TranslateX => affine(img, [1.0, 0.0, 0.0, 1.0], [sign * 0.45 * s * size, 0.0]),
            PixelOp::TranslateY => affine(img, [1.0, 0.0, 0.0, 1.0], [0.0, sign * 0.45 * s * size]),
        }
    }
}

fn planes(img: &Tensor) -> usize {
    img.shape()[1] * img.shape()[2]
}

pub fn autocontrast(img: &Tensor) -> Tensor {
    let hw = planes(img);
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

fn to_level(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Per-channel histogram equalization over 256 levels.
pub fn equalize(img: &Tensor) -> Tensor {
    let hw = planes(img);
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        let mut hist = [0usize; 256];
        plane.iter().for_each(|&v| hist[to_level(v)] += 1);
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (c, h) in cdf.iter_mut().zip(hist) {
            acc += h;
            *c = acc;
        }
        let cdf_min = cdf.iter().cloned().find(|&c| c > 0).unwrap_or(0);
        if hw == cdf_min {
            continue;
        }
        for v in plane.iter_mut() {
            *v = (cdf[to_level(*v)] - cdf_min) as f64 / (hw - cdf_min) as f64;
        }
    }
    out
}

/// Keeps the top `bits` bits of each 8-bit channel value.
pub fn posterize(img: &Tensor, bits: u32) -> Tensor {
    let bits = bits.clamp(1, 8);
    let mask = (0xFFu32 << (8 - bits)) & 0xFF;
    img.map(|v| ((to_level(v) as u32) & mask) as f64 / 255.0)
}

pub fn solarize(img: &Tensor, threshold: f64) -> Tensor {
    img.map(|v| if v >= threshold { 1.0 - v } else { v })
}

pub fn brightness(img: &Tensor, factor: f64) -> Tensor {
    img.map(|v| (v * factor).clamp(0.0, 1.0))
}

fn luminance_at(img: &Tensor, i: usize) -> f64 {
    let hw = planes(img);
    let d = img.data();
    0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]
}

pub fn contrast(img: &Tensor, factor: f64) -> Tensor {
    let hw = planes(img);
    let mean = (0..hw).map(|i| luminance_at(img, i)).sum::<f64>() / hw as f64;
    img.map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
}

pub fn saturation(img: &Tensor, factor: f64) -> Tensor {
    let hw = planes(img);
    let mut out = img.clone();
    for i in 0..hw {
        let g = luminance_at(img, i);
        for c in 0..3 {
            let v = &mut out.data_mut()[c * hw + i];
            *v = (g + factor * (*v - g)).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn rotate(img: &Tensor, degrees: f64) -> Tensor {
    let (sin, cos) = degrees.to_radians().sin_cos();
    affine(img, [cos, -sin, sin, cos], [0.0, 0.0])
}

/// Inverse-mapped affine warp about the image center with bilinear sampling
/// and black fill: output pixel `p` reads source `m * (p - c) + c - t`.
fn affine(img: &Tensor, m: [f64; 4], t: [f64; 2]) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(img.shape());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = m[0] * dx + m[1] * dy + cx - t[0];
            let sy = m[2] * dx + m[3] * dy + cy - t[1];
            for c in 0..3 {
                out.data_mut()[(c * h + y) * w + x] = bilinear(img, c, sx, sy);
            }
        }
    }
    out
}

fn bilinear(img: &Tensor, c: usize, sx: f64, sy: f64) -> f64 {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.data()[((c as isize * h + y) * w + x) as usize]
        }
    };
    let mut v = 0.0;
    for (dx, dy, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wt != 0.0 {
            v += wt * px(x0 + dx, y0 + dy);
        }
    }
    v
}

/// Which space a tensor of images lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSpace {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    RandAugment,
    TrivialAugment,
}

/// Largest policy magnitude (31 bins).
pub const MAX_MAGNITUDE: u32 = 30;

/// Applies a RandAugment- or TrivialAugment-style policy to each image of a
/// raw `[n, 3, h, w]` tensor.
///
/// RandAugment applies `n_ops` uniformly drawn ops at `magnitude`;
/// TrivialAugment applies one op at a uniformly drawn magnitude.
pub fn pixel_policy_transform(
    images: &Tensor,
    space: PixelSpace,
    mode: PolicyMode,
    n_ops: usize,
    magnitude: u32,
    rng: &mut Rng,
) -> Result<Tensor> {
    if space != PixelSpace::Raw {
        return Err(Error::invalid(
            "level",
            "pixel policies operate on raw images, not normalized tensors",
        ));
    }
    if magnitude > MAX_MAGNITUDE {
        return Err(Error::invalid(
            "magnitude",
            format!("must be <= {MAX_MAGNITUDE}, got {magnitude}"),
        ));
    }
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = Tensor::new(images.shape()[1..].to_vec(), images.item_slice(i).to_vec())?;
        match mode {
            PolicyMode::RandAugment => {
                for _ in 0..n_ops {
                    img = PixelStep::random(rng, magnitude as f64 / MAX_MAGNITUDE as f64).apply(&img);
                }
            }
            PolicyMode::TrivialAugment => {
                let m = rng.random_range(0..=MAX_MAGNITUDE);
                img = PixelStep::random(rng, m as f64 / MAX_MAGNITUDE as f64).apply(&img);
            }
        }
        out.push(img);
    }
    Tensor::stack(&out)
}

/// Dataset-level policy transform (`randaugment_lite` / `trivialaugment_lite`).
#[derive(Debug)]
pub struct PixelPolicy {
    mode: PolicyMode,
    n_ops: usize,
    magnitude: u32,
    rng: Rng,
}

impl PixelPolicy {
    pub fn randaugment(n_ops: usize, magnitude: u32, rng: Rng) -> Self {
        PixelPolicy {
            mode: PolicyMode::RandAugment,
            n_ops,
            magnitude,
            rng,
        }
    }

    pub fn trivialaugment(rng: Rng) -> Self {
        PixelPolicy {
            mode: PolicyMode::TrivialAugment,
            n_ops: 1,
            magnitude: 0,
            rng,
        }
    }
}

impl PseudoDomainTransform for PixelPolicy {
    fn name(&self) -> &'static str {
        match self.mode {
            PolicyMode::RandAugment => "randaugment_lite",
            PolicyMode::TrivialAugment => "trivialaugment_lite",
        }
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Dataset
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        pixel_policy_transform(
            &images.0,
            PixelSpace::Raw,
            self.mode,
            self.n_ops,
            self.magnitude,
            &mut self.rng,
        )
        .map(RawImages)
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        super::via_raw(self, batch)
    }
}
