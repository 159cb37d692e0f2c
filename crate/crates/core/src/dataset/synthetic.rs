//! Procedural shape/color domain-shift generator.
//!
//! The class is the rendered shape. The foreground color is a nuisance
//! attribute whose agreement with the class is set per domain, so a model
//! that keys on color transfers badly to a domain with a different
//! correlation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::rng::{self, mix_seed, streams, Rng};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "frame",
    "cross",
    "half_disk",
    "ell",
    "bar",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Noise,
    Stripes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomain {
    pub name: String,
    /// Hues in `[0, 1)`; color index `i` renders with `hue_palette[i]`.
    pub hue_palette: Vec<f64>,
    pub background: Background,
    /// Shapes are rotated uniformly within `±rotation_range` degrees.
    pub rotation_range: f64,
    /// Fraction of examples whose color index equals their label.
    pub color_class_correlation: f64,
    /// Overrides `samples_per_domain` for this domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticShiftSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_classes: usize,
    pub domains: Vec<SyntheticDomain>,
    pub image_size: usize,
    pub samples_per_domain: usize,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

/// Evenly spaced hues for `n` colors.
pub fn even_hues(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

impl SyntheticDomain {
    pub fn new(name: &str, num_colors: usize, correlation: f64, background: Background) -> Self {
        SyntheticDomain {
            name: name.into(),
            hue_palette: even_hues(num_colors),
            background,
            rotation_range: 20.0,
            color_class_correlation: correlation,
            samples: None,
        }
    }
}

impl SyntheticShiftSpec {
    /// Two domains sharing a palette whose color/class agreement differs.
    pub fn color_shift(
        num_classes: usize,
        source_correlation: f64,
        target_correlation: f64,
        image_size: usize,
        samples_per_domain: usize,
        seed: u64,
    ) -> Self {
        SyntheticShiftSpec {
            name: default_name(),
            num_classes,
            domains: vec![
                SyntheticDomain::new("source", num_classes, source_correlation, Background::Flat),
                SyntheticDomain::new("target", num_classes, target_correlation, Background::Flat),
            ],
            image_size,
            samples_per_domain,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.num_classes) {
            return Err(Error::invalid(
                "num_classes",
                format!("must be in 2..=10, got {}", self.num_classes),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::invalid(
                "image_size",
                format!("must be >= 16, got {}", self.image_size),
            ));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("domains", "at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            let key = |f: &str| format!("domains[{i}].{f}");
            if d.name.is_empty() || self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::invalid(key("name"), "names must be non-empty and unique"));
            }
            if !(0.0..=1.0).contains(&d.color_class_correlation) {
                return Err(Error::invalid(
                    key("color_class_correlation"),
                    format!("must be in [0, 1], got {}", d.color_class_correlation),
                ));
            }
            if d.hue_palette.len() < self.num_classes {
                return Err(Error::invalid(
                    key("hue_palette"),
                    format!("needs at least {} hues", self.num_classes),
                ));
            }
            if d.color_class_correlation < 1.0 && d.hue_palette.len() < 2 {
                return Err(Error::invalid(key("hue_palette"), "needs at least 2 hues"));
            }
            if !(d.rotation_range >= 0.0) {
                return Err(Error::invalid(key("rotation_range"), "must be >= 0"));
            }
            if self.samples_for(d) == 0 {
                return Err(Error::invalid(key("samples"), "must be positive"));
            }
        }
        Ok(())
    }

    fn samples_for(&self, d: &SyntheticDomain) -> usize {
        d.samples.unwrap_or(self.samples_per_domain)
    }
}

/// Renders the dataset described by `spec`. Domains appear in spec order.
pub fn generate_synthetic(spec: &SyntheticShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut examples = Vec::new();
    for (di, domain) in spec.domains.iter().enumerate() {
        let m = spec.samples_for(domain);
        let mut rng = rng::stream(mix_seed(spec.seed, &[di as u64]), streams::SYNTHETIC);
        let mut labels: Vec<usize> = (0..m).map(|i| i % spec.num_classes).collect();
        labels.shuffle(&mut rng);
        let agreeing = (domain.color_class_correlation * m as f64).round() as usize;
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut colors = vec![0; m];
        let palette = domain.hue_palette.len();
        for (rank, &i) in order.iter().enumerate() {
            colors[i] = if rank < agreeing {
                labels[i]
            } else {
                // uniform over the other palette entries
                let c = rng.random_range(0..palette - 1);
                if c >= labels[i] {
                    c + 1
                } else {
                    c
                }
            };
        }
        for i in 0..m {
            let image = render(spec.image_size, labels[i], domain, colors[i], &mut rng);
            examples.push(LabeledExample {
                id: examples.len(),
                image: Arc::new(image),
                label: labels[i],
                domain: domain.name.clone(),
                color_index: Some(colors[i]),
            });
        }
    }
    let ds = DomainDataset {
        name: spec.name.clone(),
        domains: spec.domains.iter().map(|d| d.name.clone()).collect(),
        examples,
        class_names: SHAPE_NAMES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    Ok(ds)
}

fn render(size: usize, shape: usize, domain: &SyntheticDomain, color: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let radius = s * rng.random_range(0.26..0.36);
    let theta = if domain.rotation_range > 0.0 {
        rng.random_range(-domain.rotation_range..=domain.rotation_range).to_radians()
    } else {
        0.0
    };
    let hue = domain.hue_palette[color] + rng.random_range(-0.02..0.02);
    let fg = hsv_to_rgb(
        hue.rem_euclid(1.0),
        rng.random_range(0.75..1.0),
        rng.random_range(0.75..1.0),
    );
    let bg = BackgroundField::draw(domain.background, rng);
    let (sin, cos) = theta.sin_cos();
    let mut data = vec![0.0; 3 * size * size];
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    for py in 0..size {
        for px in 0..size {
            let mut covered = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (px as f64 + ox - cx) / radius;
                let dy = (py as f64 + oy - cy) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if inside(shape, u, v) {
                    covered += 0.25;
                }
            }
            let mut g = bg.level(px as f64, py as f64);
            if bg.kind == Background::Noise {
                g += noise.sample(rng);
            }
            let g = g.clamp(0.0, 1.0);
            for c in 0..3 {
                data[(c * size + py) * size + px] = covered * fg[c] + (1.0 - covered) * g;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("rendered image shape")
}

struct BackgroundField {
    kind: Background,
    level: f64,
    period: f64,
    angle: f64,
    phase: f64,
}

impl BackgroundField {
    fn draw(kind: Background, rng: &mut Rng) -> Self {
        BackgroundField {
            kind,
            level: rng.random_range(0.3..0.6),
            period: rng.random_range(3.0..6.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn level(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            Background::Flat | Background::Noise => self.level,
            Background::Stripes => {
                let t = x * self.angle.cos() + y * self.angle.sin();
                self.level + 0.2 * (std::f64::consts::TAU * t / self.period + self.phase).sin()
            }
        }
    }
}

/// Membership test in shape-local coordinates (unit radius, y down).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let (au, av) = (u.abs(), v.abs());
    match shape {
        0 => r2 <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => {
            // apex up, base at v = 0.7
            v <= 0.7 && v >= -1.0 && au <= 0.95 * (v + 1.0) / 1.7
        }
        3 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        4 => (0.3025..=1.0).contains(&r2),
        5 => {
            let m = au.max(av);
            (0.45..=0.85).contains(&m)
        }
        6 => {
            let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (a.abs() <= 0.28 && b.abs() <= 1.0) || (b.abs() <= 0.28 && a.abs() <= 1.0)
        }
        7 => r2 <= 1.0 && v >= -0.1,
        8 => ((-0.8..=-0.3).contains(&u) && av <= 0.9) || ((0.4..=0.9).contains(&v) && au <= 0.8),
        _ => au <= 1.0 && av <= 0.35,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
