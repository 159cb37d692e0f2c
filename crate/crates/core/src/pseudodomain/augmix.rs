//! Chain-mixing augmentations: a light AugMix and an IPMix variant that
//! mixes with procedurally generated textures instead of a fractal corpus.

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma};

use super::pixel_ops::PixelStep;
use super::{PseudoDomainTransform, RawImages, TransformLevel};
use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::{self, mix_seed, streams, Rng};
use crate::tensor::Tensor;

pub type Chain = Vec<PixelStep>;

/// Dirichlet draw via normalized Gamma variates.
pub fn dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|v| *v /= sum);
    } else {
        w.fill(1.0 / k as f64);
    }
    w
}

fn run_chain(img: &Tensor, chain: &[PixelStep]) -> Tensor {
    chain.iter().fold(img.clone(), |acc, step| step.apply(&acc))
}

/// `m * image + (1 - m) * sum_j weights[j] * chain_j(image)`.
pub fn augmix_combine(image: &Tensor, chains: &[Chain], weights: &[f64], m: f64) -> Tensor {
    let mut mix = Tensor::zeros(image.shape());
    for (chain, &w) in chains.iter().zip(weights) {
        let out = run_chain(image, chain);
        for (a, b) in mix.data_mut().iter_mut().zip(out.data()) {
            *a += w * b;
        }
    }
    image.zip_map(&mix, |x, y| m * x + (1.0 - m) * y)
}

fn sample_chain(depth: usize, severity: u32, rng: &mut Rng) -> Chain {
    let d = rng.random_range(1..=depth);
    (0..d)
        .map(|_| {
            let level = rng.random_range(0.1..=severity as f64);
            PixelStep::random(rng, level / 10.0)
        })
        .collect()
}

fn check_common(severity: u32, depth: usize) -> Result<()> {
    if !(1..=10).contains(&severity) {
        return Err(Error::invalid("severity", "must be in 1..=10"));
    }
    if depth == 0 {
        return Err(Error::invalid("depth", "must be at least 1"));
    }
    Ok(())
}

fn per_image(images: &RawImages, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<RawImages> {
    let n = images.0.shape()[0];
    let shape = images.0.shape()[1..].to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = Tensor::new(shape.clone(), images.0.item_slice(i).to_vec())?;
        out.push(f(&img)?);
    }
    Ok(RawImages(Tensor::stack(&out)?))
}

#[derive(Debug)]
pub struct AugMixLite {
    severity: u32,
    width: usize,
    depth: usize,
    alpha: f64,
    rng: Rng,
}

impl AugMixLite {
    pub fn new(severity: u32, width: usize, depth: usize, alpha: f64, rng: Rng) -> Result<Self> {
        check_common(severity, depth)?;
        if width == 0 {
            return Err(Error::invalid("width", "must be at least 1"));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        Ok(AugMixLite {
            severity,
            width,
            depth,
            alpha,
            rng,
        })
    }
}

impl PseudoDomainTransform for AugMixLite {
    fn name(&self) -> &'static str {
        "augmix_lite"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Dataset
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        let beta = Beta::new(self.alpha, self.alpha).expect("positive alpha");
        per_image(images, |img| {
            let weights = dirichlet(self.alpha, self.width, &mut self.rng);
            let m = beta.sample(&mut self.rng);
            let chains: Vec<Chain> = (0..self.width)
                .map(|_| sample_chain(self.depth, self.severity, &mut self.rng))
                .collect();
            Ok(augmix_combine(img, &chains, &weights, m))
        })
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        super::via_raw(self, batch)
    }
}

/// Spatial support of a texture blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Pixel,
    Patch4,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    Additive,
    Multiplicative,
}

/// Multi-octave value-noise RGB textures in `[0, 1]`, a pure function of
/// `(seed, count, h, w)`.
pub fn texture_pool(seed: u64, count: usize, h: usize, w: usize) -> Vec<Tensor> {
    let mut rng = rng::stream(seed, streams::TEXTURE_POOL);
    (0..count).map(|_| value_noise(h, w, &mut rng)).collect()
}

fn value_noise(h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for c in 0..3 {
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        let mut amplitude = 1.0;
        for octave in 0..4 {
            let cells = 2usize << octave;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            for y in 0..h {
                let gy = y as f64 / h as f64 * cells as f64;
                let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
                for x in 0..w {
                    let gx = x as f64 / w as f64 * cells as f64;
                    let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
                    let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
                    let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
                    let bottom = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
                    plane[y * w + x] += amplitude * (top * (1.0 - fy) + bottom * fy);
                }
            }
            amplitude *= 0.5;
        }
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    Tensor::new(vec![3, h, w], data).expect("texture shape")
}

/// Boolean `[h, w]` mask selecting where the texture is blended in.
pub fn blend_mask(granularity: Granularity, h: usize, w: usize, rng: &mut Rng) -> Vec<bool> {
    match granularity {
        Granularity::Whole => vec![true; h * w],
        Granularity::Pixel => (0..h * w).map(|_| rng.random_bool(0.5)).collect(),
        Granularity::Patch4 => {
            let (ph, pw) = (h.div_ceil(4), w.div_ceil(4));
            let patches: Vec<bool> = (0..ph * pw).map(|_| rng.random_bool(0.5)).collect();
            (0..h * w)
                .map(|i| patches[(i / w / 4) * pw + (i % w) / 4])
                .collect()
        }
    }
}

/// Blends `texture` into `image` on `mask` with the given weight, clamped to
/// `[0, 1]`.
pub fn ipmix_blend(image: &Tensor, texture: &Tensor, mask: &[bool], mode: BlendMode, weight: f64) -> Tensor {
    let hw = mask.len();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask[i % hw] {
            continue;
        }
        let t = texture.data()[i];
        let blended = match mode {
            BlendMode::Additive => (1.0 - weight) * *v + weight * t,
            BlendMode::Multiplicative => v.max(0.0).powf(1.0 - weight) * t.max(0.0).powf(weight),
        };
        *v = blended.clamp(0.0, 1.0);
    }
    out
}

#[derive(Debug)]
pub struct IpMixLite {
    severity: u32,
    depth: usize,
    pool_size: usize,
    pool_seed: u64,
    pool: Option<((usize, usize), Vec<Tensor>)>,
    rng: Rng,
}

impl IpMixLite {
    pub fn new(severity: u32, mixing_set_size: usize, pool_seed: u64, rng: Rng) -> Result<Self> {
        check_common(severity, 3)?;
        if mixing_set_size == 0 {
            return Err(Error::invalid("mixing_set_size", "must be at least 1"));
        }
        Ok(IpMixLite {
            severity,
            depth: 3,
            pool_size: mixing_set_size,
            pool_seed: mix_seed(pool_seed, &[streams::TEXTURE_POOL]),
            pool: None,
            rng,
        })
    }

    fn pool_for(&mut self, h: usize, w: usize) -> &[Tensor] {
        let stale = self.pool.as_ref().is_none_or(|(dims, _)| *dims != (h, w));
        if stale {
            self.pool = Some(((h, w), texture_pool(self.pool_seed, self.pool_size, h, w)));
        }
        &self.pool.as_ref().expect("pool just built").1
    }
}

impl PseudoDomainTransform for IpMixLite {
    fn name(&self) -> &'static str {
        "ipmix_lite"
    }

    fn level(&self) -> TransformLevel {
        TransformLevel::Dataset
    }

    fn apply_raw(&mut self, images: &RawImages) -> Result<RawImages> {
        let (h, w) = (images.0.shape()[2], images.0.shape()[3]);
        let pool = self.pool_for(h, w).to_vec();
        per_image(images, |img| {
            let chain = sample_chain(self.depth, self.severity, &mut self.rng);
            let chained = run_chain(img, &chain);
            let texture = &pool[self.rng.random_range(0..pool.len())];
            let granularity = [Granularity::Pixel, Granularity::Patch4, Granularity::Whole]
                [self.rng.random_range(0..3)];
            let mode = if self.rng.random_bool(0.5) {
                BlendMode::Additive
            } else {
                BlendMode::Multiplicative
            };
            let weight = self.rng.random_range(0.0..1.0);
            let mask = blend_mask(granularity, h, w, &mut self.rng);
            Ok(ipmix_blend(&chained, texture, &mask, mode, weight))
        })
    }

    fn apply_batch(&mut self, batch: &MiniBatch) -> Result<MiniBatch> {
        super::via_raw(self, batch)
    }
}
