use pocon_nn::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Stochastic view generation for the two-branch SSL objective. Per-view
/// probabilities are `[view_a, view_b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Random-resized-crop area fraction range.
    pub crop_scale: (f64, f64),
    /// Random-resized-crop aspect ratio range.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: [f64; 2],
    pub blur_sigma: (f64, f64),
    pub solarize_prob: [f64; 2],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: [0.0, 0.0],
            blur_sigma: (0.1, 2.0),
            solarize_prob: [0.0, 0.2],
        }
    }
}

impl AugConfig {
    /// Leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: [0.0, 0.0],
            blur_sigma: (0.1, 2.0),
            solarize_prob: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.crop_scale.0 > 0.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0
            && self.crop_ratio.0 > 0.0
            && self.crop_ratio.0 <= self.crop_ratio.1
            && prob(self.flip_prob)
            && prob(self.jitter_prob)
            && prob(self.grayscale_prob)
            && self.blur_prob.iter().all(|&p| prob(p))
            && self.solarize_prob.iter().all(|&p| prob(p))
            && self.blur_sigma.0 > 0.0
            && self.blur_sigma.0 <= self.blur_sigma.1;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidArgument(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// Two augmented views of the same source batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<T> {
    pub view_a: Tensor<T>,
    pub view_b: Tensor<T>,
    pub source_indices: Vec<usize>,
}

/// Produces two independent augmentations of every image in `batch`
/// (`[B, C, H, W]`, values in `[0, 1]`). The result depends only on the
/// inputs and the state of `rng`.
pub fn two_view_augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, aug: &AugConfig, rng: &mut R) -> Result<ViewPair<T>> {
    let [b, _, _, _] = batch.dims4()?;
    if b == 0 {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let view_a = augment_batch(batch, aug, 0, rng)?;
    let view_b = augment_batch(batch, aug, 1, rng)?;
    Ok(ViewPair { view_a, view_b, source_indices: (0..b).collect() })
}

/// One augmented view of every image, using the per-view probabilities of
/// slot `view` (0 or 1).
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, aug: &AugConfig, view: usize, rng: &mut R) -> Result<Tensor<T>> {
    let [b, c, h, w] = batch.dims4()?;
    let mut out = batch.clone();
    let plane = c * h * w;
    let mut img = vec![0.0f64; plane];
    for n in 0..b {
        for (d, s) in img.iter_mut().zip(&batch.data()[n * plane..(n + 1) * plane]) {
            *d = s.as_f64();
        }
        augment_image(&mut img, [c, h, w], aug, view, rng);
        for (d, &s) in out.data_mut()[n * plane..(n + 1) * plane].iter_mut().zip(&img) {
            *d = T::lit(s);
        }
    }
    Ok(out)
}

fn augment_image<R: Rng + ?Sized>(img: &mut Vec<f64>, [c, h, w]: [usize; 3], aug: &AugConfig, view: usize, rng: &mut R) {
    random_resized_crop(img, [c, h, w], aug, rng);
    if rng.random::<f64>() < aug.flip_prob {
        for ch in 0..c {
            for y in 0..h {
                img[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
            }
        }
    }
    if c == 3 && rng.random::<f64>() < aug.jitter_prob {
        color_jitter(img, h * w, aug, rng);
    }
    if c == 3 && rng.random::<f64>() < aug.grayscale_prob {
        let hw = h * w;
        for p in 0..hw {
            let g = luma(img[p], img[hw + p], img[2 * hw + p]);
            img[p] = g;
            img[hw + p] = g;
            img[2 * hw + p] = g;
        }
    }
    if rng.random::<f64>() < aug.blur_prob[view] {
        let sigma = rng.random_range(aug.blur_sigma.0..=aug.blur_sigma.1);
        gaussian_blur(img, [c, h, w], sigma);
    }
    if rng.random::<f64>() < aug.solarize_prob[view] {
        for v in img.iter_mut() {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn random_resized_crop<R: Rng + ?Sized>(img: &mut Vec<f64>, [c, h, w]: [usize; 3], aug: &AugConfig, rng: &mut R) {
    let area = (h * w) as f64;
    let scale = rng.random_range(aug.crop_scale.0..=aug.crop_scale.1);
    let log_ratio = rng.random_range(aug.crop_ratio.0.ln()..=aug.crop_ratio.1.ln());
    let ratio = log_ratio.exp();
    let cw = (scale * area * ratio).sqrt().round().clamp(1.0, w as f64) as usize;
    let chh = (scale * area / ratio).sqrt().round().clamp(1.0, h as f64) as usize;
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - chh);
    if cw == w && chh == h {
        return;
    }
    let mut out = vec![0.0; img.len()];
    let sx = cw as f64 / w as f64;
    let sy = chh as f64 / h as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (chh - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(chh - 1);
        let ty = fy - y_lo as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(cw - 1);
            let tx = fx - x_lo as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| img[(ch * h + y0 + yy) * w + x0 + xx];
                let top = at(y_lo, x_lo) * (1.0 - tx) + at(y_lo, x_hi) * tx;
                let bottom = at(y_hi, x_lo) * (1.0 - tx) + at(y_hi, x_hi) * tx;
                out[(ch * h + y) * w + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    *img = out;
}

fn color_jitter<R: Rng + ?Sized>(img: &mut [f64], hw: usize, aug: &AugConfig, rng: &mut R) {
    let factor = |s: f64, rng: &mut R| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    let b = factor(aug.brightness, rng);
    let con = factor(aug.contrast, rng);
    let sat = factor(aug.saturation, rng);
    let hue = if aug.hue > 0.0 { rng.random_range(-aug.hue..=aug.hue) } else { 0.0 };
    for v in img.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let mean_gray = (0..hw).map(|p| luma(img[p], img[hw + p], img[2 * hw + p])).sum::<f64>() / hw as f64;
    for v in img.iter_mut() {
        *v = ((*v - mean_gray) * con + mean_gray).clamp(0.0, 1.0);
    }
    for p in 0..hw {
        let g = luma(img[p], img[hw + p], img[2 * hw + p]);
        for ch in 0..3 {
            let v = &mut img[ch * hw + p];
            *v = ((*v - g) * sat + g).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for p in 0..hw {
            let (hh, s, v) = rgb_to_hsv(img[p], img[hw + p], img[2 * hw + p]);
            let (r, g, b) = hsv_to_rgb((hh + hue).rem_euclid(1.0), s, v);
            img[p] = r;
            img[hw + p] = g;
            img[2 * hw + p] = b;
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gaussian_blur(img: &mut [f64], [c, h, w]: [usize; 3], sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let xx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                        k * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let yy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                        k * tmp[yy * w + x]
                    })
                    .sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(b: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Tensor::<f32>::uniform(&[b, 3, 8, 8], 0.5, &mut rng).map(|v| v + 0.5)
    }

    #[test]
    fn identity_config_is_a_no_op() {
        let x = batch(2);
        let v = two_view_augment(&x, &AugConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(v.view_a, x);
        assert_eq!(v.view_b, x);
    }

    #[test]
    fn same_rng_state_gives_bit_identical_views() {
        let x = batch(8);
        let rng = ChaCha8Rng::seed_from_u64(42);
        let a = two_view_augment(&x, &AugConfig::default(), &mut rng.clone()).unwrap();
        let b = two_view_augment(&x, &AugConfig::default(), &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.view_a.shape(), x.shape());
        assert_ne!(a.view_a, a.view_b);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let x = batch(16);
        let aug = AugConfig { blur_prob: [1.0, 1.0], solarize_prob: [1.0, 1.0], ..Default::default() };
        let v = two_view_augment(&x, &aug, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(v.view_a.data().iter().chain(v.view_b.data()).all(|&p| (-1e-6..=1.0 + 1e-6).contains(&p)));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() + (g - g2).abs() + (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[0, 3, 4, 4]);
        assert!(two_view_augment(&x, &AugConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
