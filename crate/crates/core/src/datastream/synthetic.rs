//! Procedural small-image classification data.
//!
//! In [`Pattern::Gratings`] each class is an oriented sinusoidal grating with
//! a class-specific orientation, frequency and colour pair. In
//! [`Pattern::Shapes`] each class is a structurally distinct shape family
//! (rings, checkerboards, spokes and so on). Both draw over a smooth random
//! background with a randomly placed blob, and instances vary in phase,
//! contrast, placement and pixel noise.

use pocon_nn::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, Split};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[default]
    Gratings,
    /// Ten shape families; class `c` uses family `c % 10`.
    Shapes,
}

const SHAPE_FAMILIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub pattern: Pattern,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Jitter of the grating orientation (radians) within a class.
    pub orientation_jitter: f64,
    /// Per-sample hue shift range (fraction of the colour wheel). At 0.5 colour
    /// carries no class information.
    pub hue_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            pattern: Pattern::Gratings,
            image_size: 16,
            train_per_class: 200,
            test_per_class: 100,
            noise: 0.08,
            orientation_jitter: 0.15,
            hue_jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ClassStyle {
    family: usize,
    orientation: f64,
    frequency: f64,
    hue: f64,
    bg_hue: f64,
}

fn class_styles(spec: &SyntheticSpec) -> Vec<ClassStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c1a5);
    let k = spec.num_classes;
    (0..k)
        .map(|c| {
            let hue = c as f64 / k as f64;
            ClassStyle {
                family: c % SHAPE_FAMILIES,
                orientation: std::f64::consts::PI * ((c * 7) % k) as f64 / k as f64,
                frequency: 1.5 + 2.5 * ((c * 3) % k) as f64 / k as f64,
                hue,
                bg_hue: hue + 0.5 + rng.random_range(-0.1..0.1),
            }
        })
        .collect()
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0).rem_euclid(6.0);
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Per-instance geometry for the shape families.
struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
    cos: f64,
    sin: f64,
    phase: f64,
}

/// Intensity in `[0, 1]` of shape `family` at normalized coordinates `(u, v)`.
fn shape(family: usize, p: &Placement, u: f64, v: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let (x, y) = ((u - p.cx) / p.scale, (v - p.cy) / p.scale);
    let (x, y) = (p.cos * x - p.sin * y, p.sin * x + p.cos * y);
    let r = x.hypot(y);
    let soft = |d: f64| 1.0 / (1.0 + (-d * 12.0).exp());
    match family {
        0 => 0.5 + 0.5 * (TAU * 1.5 * x + p.phase).sin(),
        1 => {
            let c = (PI * 2.0 * x + p.phase).sin() * (PI * 2.0 * y + p.phase).sin();
            soft(c * 2.0)
        }
        2 => 0.5 + 0.5 * (TAU * 2.0 * r + p.phase).cos(),
        3 => 0.5 + 0.5 * (4.0 * y.atan2(x) + p.phase).sin(),
        4 => soft(0.55 - r),
        5 => soft(0.15 - (x.abs().max(y.abs()) - 0.55).abs()),
        6 => soft(0.18 - x.abs().min(y.abs())) * soft(0.8 - x.abs().max(y.abs())),
        7 => {
            let d = ((x * 2.0 + p.phase / TAU).rem_euclid(1.0) - 0.5).hypot((y * 2.0).rem_euclid(1.0) - 0.5);
            soft(0.22 - d)
        }
        8 => soft(0.12 - (y - 0.5 * (PI * 1.5 * x + p.phase).sin()).abs()),
        _ => soft(0.5 - (x.abs() + y.abs())) * soft((x.abs() + y.abs()) - 0.2),
    }
}

fn render<R: Rng>(style: &ClassStyle, spec: &SyntheticSpec, rng: &mut R, out: &mut [f64]) {
    let s = spec.image_size;
    let theta = style.orientation + rng.random_range(-spec.orientation_jitter..=spec.orientation_jitter);
    let (dx, dy) = (theta.cos(), theta.sin());
    let freq = style.frequency * std::f64::consts::TAU / s as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.6..1.0);
    let (bx, by) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
    let br = rng.random_range(0.15..0.3) * s as f64;
    let blob_shade = rng.random_range(-0.3..0.3);
    let shift = if spec.hue_jitter > 0.0 { rng.random_range(-spec.hue_jitter..spec.hue_jitter) } else { 0.0 };
    let fg = hue_to_rgb((style.hue + shift).rem_euclid(1.0));
    let bg = hue_to_rgb((style.bg_hue + shift).rem_euclid(1.0)).map(|v| 0.35 + 0.3 * v);
    let tilt = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let rot = style.orientation + rng.random_range(-spec.orientation_jitter..=spec.orientation_jitter);
    let place = Placement {
        cx: rng.random_range(-0.25..0.25),
        cy: rng.random_range(-0.25..0.25),
        scale: rng.random_range(0.8..1.2),
        cos: rot.cos(),
        sin: rot.sin(),
        phase,
    };
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            let g = match spec.pattern {
                Pattern::Gratings => 0.5 + 0.5 * (freq * (xf * dx + yf * dy) + phase).sin(),
                Pattern::Shapes => {
                    let (u, v) = ((2.0 * xf + 1.0) / s as f64 - 1.0, (2.0 * yf + 1.0) / s as f64 - 1.0);
                    shape(style.family, &place, u, v)
                }
            };
            let g = g * contrast;
            let d2 = ((xf - bx).powi(2) + (yf - by).powi(2)) / (br * br);
            let blob = blob_shade * (-d2).exp();
            let shade = tilt[0] * (xf / s as f64 - 0.5) + tilt[1] * (yf / s as f64 - 0.5);
            for ch in 0..3 {
                let v = bg[ch] * (1.0 - g) + fg[ch] * g + blob + shade;
                out[(ch * s + y) * s + x] = v;
            }
        }
    }
    for v in out.iter_mut() {
        *v = (*v + spec.noise * pocon_nn::tensor::standard_normal(rng)).clamp(0.0, 1.0);
    }
}

fn generate<T: Scalar>(spec: &SyntheticSpec, per_class: usize, stream_seed: u64, split: Split) -> Result<LabeledDataset<T>> {
    let styles = class_styles(spec);
    let s = spec.image_size;
    let plane = 3 * s * s;
    let n = per_class * spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut values = vec![0.0; n * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_classes;
        render(&styles[c], spec, &mut rng, &mut values[i * plane..(i + 1) * plane]);
        labels.push(c);
    }
    LabeledDataset::new(Tensor::from_f64(&[n, 3, s, s], &values)?, labels, spec.num_classes, split)
}

/// Generates `(train, test)` splits.
pub fn synthetic_dataset<T: Scalar>(spec: &SyntheticSpec) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let train = generate(spec, spec.train_per_class, spec.seed.wrapping_mul(2).wrapping_add(1), Split::Train)?;
    let test = generate(spec, spec.test_per_class, spec.seed.wrapping_mul(2).wrapping_add(2), Split::Test)?;
    Ok((train, test))
}
